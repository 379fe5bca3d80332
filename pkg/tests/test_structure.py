import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from umst.structure import (ConlluError, DependencyGraph, MalformedSegmentation, ScaleStructure,
                            Segmentation, StructureFormatError, build_group_map,
                            build_phrase_adjacency, build_word_adjacency, normalized_operator,
                            parse_bpe_stream, parse_conllu, parse_structure, randomize_adjacency,
                            serialize_structure, shuffle_word_adjacency)
from umst.verify import (check_structure_sample, oracle_group_map, oracle_normalized,
                         oracle_word_adjacency)

PAPER_SENTENCE = "Inter@@ sex children pose ethical dil@@ em@@ ma .".split()


def conllu(heads):
    return "\n".join(f"{i}\tw{i}\t_\t_\t_\t_\t{h}\tdep\t_\t_" for i, h in enumerate(heads, 1))


class TestParseBpe:
    def test_paper_fragment(self):
        seg = parse_bpe_stream(["Inter@@", "sex", "children"])
        assert seg.word_index == (0, 0, 1)
        assert seg.class_flag == (1, 1, 0)

    def test_no_fragments(self):
        seg = parse_bpe_stream(["a", "b", "c"])
        assert seg.word_index == (0, 1, 2) and seg.class_flag == (0, 0, 0)

    def test_three_piece_word(self):
        seg = parse_bpe_stream(["dil@@", "em@@", "ma"])
        assert seg.L_words == 1 and seg.class_flag == (1, 1, 1)

    def test_full_sentence(self):
        seg = parse_bpe_stream(PAPER_SENTENCE)
        assert seg.L == 9 and seg.L_words == 6
        assert seg.group_sizes == [2, 1, 1, 1, 3, 1]
        assert seg.tokens == tuple(PAPER_SENTENCE)

    def test_final_marker_rejected(self):
        with pytest.raises(MalformedSegmentation):
            parse_bpe_stream(["a", "b@@"])

    def test_alternate_marker(self):
        seg = parse_bpe_stream(["un##", "happy", "cat"], marker="##")
        assert seg.word_index == (0, 0, 1)

    def test_invariants_enforced(self):
        with pytest.raises(MalformedSegmentation):
            Segmentation(("a", "b"), (0, 2), (0, 0))
        with pytest.raises(MalformedSegmentation):
            Segmentation(("a", "b"), (0, 0), (0, 0))


class TestParseConllu:
    def test_tree(self):
        assert parse_conllu(conllu([2, 0, 2])).edges == {(0, 1), (1, 2)}

    def test_single_root(self):
        dep = parse_conllu(conllu([0]))
        assert dep.word_count == 1 and not dep.edges

    def test_head_out_of_range(self):
        with pytest.raises(ConlluError) as info:
            parse_conllu(conllu([2, 0, 4]))
        assert info.value.lineno == 3

    def test_non_integer_head(self):
        with pytest.raises(ConlluError):
            parse_conllu(conllu([2, 0]).replace("\t2\t", "\tx\t", 1))

    def test_skips_comments_ranges_and_empty_nodes(self):
        text = "\n".join([
            "# text = can't go",
            "1-2\tcan't\t_\t_\t_\t_\t_\t_\t_\t_",
            "1\tca\t_\t_\t_\t_\t3\taux\t_\t_",
            "2\tn't\t_\t_\t_\t_\t3\tadvmod\t_\t_",
            "2.1\tx\t_\t_\t_\t_\t_\t_\t_\t_",
            "3\tgo\t_\t_\t_\t_\t0\troot\t_\t_",
        ])
        dep = parse_conllu(text)
        assert dep.word_count == 3 and dep.edges == {(0, 2), (1, 2)}


class TestAdjacency:
    def test_word_adjacency_pair(self):
        seg = Segmentation.from_word_index([0, 0, 1])
        assert build_word_adjacency(seg).tolist() == [[0, 1, 0], [1, 0, 0], [0, 0, 0]]

    def test_word_adjacency_singletons(self):
        assert not build_word_adjacency(Segmentation.from_word_index([0, 1, 2])).any()

    def test_word_adjacency_one_word(self):
        a = build_word_adjacency(Segmentation.from_word_index([0, 0, 0]))
        assert np.array_equal(a, oracle_word_adjacency([0, 0, 0]))
        assert np.array_equal(a, np.ones((3, 3)) - np.eye(3))

    def test_phrase_adjacency(self):
        assert build_phrase_adjacency(DependencyGraph(2, frozenset({(0, 1)}))).tolist() == [[0, 1], [1, 0]]
        assert not build_phrase_adjacency(DependencyGraph(3)).any()
        a = build_phrase_adjacency(DependencyGraph(3, frozenset({(0, 1), (1, 2)})))
        assert np.array_equal(a, a.T) and a.sum() == 4 and not np.diag(a).any()

    def test_group_map(self):
        g = build_group_map(Segmentation.from_word_index([0, 0, 1]))
        assert g.tolist() == [[1, 0], [1, 0], [0, 1]]
        assert np.array_equal(g.T @ g, np.diag([2.0, 1.0]))
        assert np.array_equal(build_group_map(Segmentation.from_word_index([0, 1, 2])), np.eye(3))

    def test_dependency_graph_validation(self):
        with pytest.raises(ValueError):
            DependencyGraph(2, frozenset({(1, 1)}))
        with pytest.raises(ValueError):
            DependencyGraph(2, frozenset({(0, 2)}))
        assert DependencyGraph(2, frozenset({(1, 0), (0, 1)})).edges == {(0, 1)}


class TestNormalizedOperator:
    def test_pair_block(self):
        a = build_word_adjacency(Segmentation.from_word_index([0, 0, 1]))
        assert np.allclose(normalized_operator(a), [[.5, .5, 0], [.5, .5, 0], [0, 0, 1]], atol=1e-15)

    def test_zero_matrix(self):
        assert np.array_equal(normalized_operator(np.zeros((4, 4))), np.eye(4))

    def test_phrase_pair(self):
        assert np.allclose(normalized_operator(np.array([[0, 1], [1, 0]])), 0.5, atol=1e-15)

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            normalized_operator(np.array([[0, 1], [0, 0]]))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 12), st.floats(0, 1), st.integers(0, 2**31))
    def test_matches_dense_oracle(self, n, density, seed):
        a = randomize_adjacency(n, density, seed)
        s = normalized_operator(a)
        assert np.max(np.abs(s - oracle_normalized(a))) <= 1e-12
        assert np.max(np.abs(s - s.T)) <= 1e-15
        assert s.min() >= 0 and s.max() <= 1


segmentations = st.lists(st.integers(1, 4), min_size=1, max_size=6).map(
    lambda sizes: Segmentation.from_word_index(np.repeat(np.arange(len(sizes)), sizes).tolist()))


@st.composite
def structures(draw):
    seg = draw(segmentations)
    n = seg.L_words
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    edges = draw(st.sets(st.sampled_from(pairs))) if pairs else set()
    return seg, DependencyGraph(n, frozenset(edges))


@settings(max_examples=200, deadline=None)
@given(structures())
def test_structure_invariants_hold(pair):
    seg, dep = pair
    assert check_structure_sample(seg, dep) == []
    st_ = ScaleStructure.build(seg, dep)
    assert np.array_equal(st_.G, oracle_group_map(list(seg.word_index)))
    assert np.array_equal(st_.word_index, seg.word_index)


class TestPerturbations:
    def test_random_density_extremes(self):
        assert not randomize_adjacency(5, 0.0, 1).any()
        assert np.array_equal(randomize_adjacency(5, 1.0, 1), np.ones((5, 5)) - np.eye(5))

    def test_random_is_seeded(self):
        assert np.array_equal(randomize_adjacency(9, 0.3, 42), randomize_adjacency(9, 0.3, 42))

    def test_random_symmetric_zero_diagonal(self):
        a = randomize_adjacency(10, 0.5, 3)
        assert np.array_equal(a, a.T) and not np.diag(a).any()

    def test_shuffle_explicit_permutation(self):
        seg = Segmentation.from_word_index([0, 0, 1, 2, 2, 2])
        _, wi = shuffle_word_adjacency(seg, permutation=[1, 2, 0])
        assert np.bincount(wi).tolist() == [1, 3, 2]

    def test_shuffle_identity(self):
        seg = Segmentation.from_word_index([0, 0, 1, 2, 2, 2])
        a, wi = shuffle_word_adjacency(seg, permutation=[0, 1, 2])
        assert np.array_equal(a, build_word_adjacency(seg)) and wi == list(seg.word_index)

    def test_shuffle_equal_sizes_is_relabeling(self):
        seg = Segmentation.from_word_index([0, 0, 1, 1, 2, 2])
        a, _ = shuffle_word_adjacency(seg, seed=5)
        assert np.array_equal(a, build_word_adjacency(seg))

    @settings(max_examples=100, deadline=None)
    @given(segmentations, st.integers(0, 1000))
    def test_shuffle_preserves_size_multiset(self, seg, seed):
        a, wi = shuffle_word_adjacency(seg, seed=seed)
        assert sorted(np.bincount(wi).tolist()) == sorted(seg.group_sizes)
        assert len(wi) == seg.L
        assert np.array_equal(a, oracle_word_adjacency(wi))


class TestSidecar:
    def test_round_trip_paper_sentence(self):
        seg = parse_bpe_stream(PAPER_SENTENCE)
        dep = DependencyGraph(seg.L_words, frozenset({(0, 1), (1, 2), (2, 3), (3, 4), (2, 5)}))
        line = serialize_structure(seg, dep)
        assert parse_structure(line) == (seg, dep)

    def test_empty_edges_preserved(self):
        seg = parse_bpe_stream(["a", "b"])
        line = serialize_structure(seg, DependencyGraph(2))
        assert json.loads(line)["dep_edges"] == []
        assert parse_structure(line)[1].edges == frozenset()

    def test_length_mismatch(self):
        bad = '{"tokens": ["a"], "word_ids": [0, 1], "classes": [0], "dep_edges": []}'
        with pytest.raises(StructureFormatError):
            parse_structure(bad)

    @pytest.mark.parametrize("bad", [
        "not json",
        '["a"]',
        '{"tokens": ["a", "b"], "word_ids": [0, 1], "classes": [0, 0], "dep_edges": [[0, 2]]}',
        '{"tokens": ["a", "b"], "word_ids": [0, 0], "classes": [0, 0], "dep_edges": []}',
        '{"tokens": ["a"], "word_ids": [0], "classes": [0]}',
    ])
    def test_malformed(self, bad):
        with pytest.raises(StructureFormatError):
            parse_structure(bad)

    @settings(max_examples=100, deadline=None)
    @given(structures())
    def test_round_trip_identity(self, pair):
        seg, dep = pair
        assert parse_structure(serialize_structure(seg, dep)) == (seg, dep)

    def test_mismatched_parse_rejected(self):
        seg = parse_bpe_stream(["a@@", "b", "c"])
        with pytest.raises(MalformedSegmentation):
            ScaleStructure.build(seg, DependencyGraph(3))

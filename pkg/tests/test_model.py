import numpy as np
import pytest

from umst import tensor as T
from umst.layers import StructureOperators
from umst.model import (BOS, EOS, Batch, Example, ModelConfig, Seq2Seq, load_checkpoint,
                        save_checkpoint, sinusoid_positions)
from umst.reference import vanilla_logits
from umst.structure import DependencyGraph, ScaleStructure, Segmentation
from umst.verify import tiny_umst, vanilla_config


def sentence(word_index, edges=(), seed=0, vocab=9):
    seg = Segmentation.from_word_index(list(word_index))
    st = ScaleStructure.build(seg, DependencyGraph(seg.L_words, frozenset(edges)))
    ids = np.random.default_rng(seed).integers(4, vocab, size=seg.L)
    return Example(ids, np.array(seg.class_flag), st, np.array([4, 5]))


class TestConfig:
    @pytest.mark.parametrize("bad", [
        dict(d_model=10, n_heads=3), dict(dropout=1.0), dict(dropout=-0.1),
        dict(wgcn_impl="gat"), dict(upsample_mode="cubic"), dict(sharing="all"),
        dict(precision="float16"), dict(src_vocab_size=0),
    ])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(**bad)

    def test_dict_round_trip(self):
        cfg = ModelConfig(d_model=8, sharing="within_block", share_qk=True)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(KeyError, match="hidden"):
            ModelConfig.from_dict({"hidden": 3})


class TestEmbedding:
    def test_position_zero_pattern(self):
        pe = sinusoid_positions(1, 6)
        assert pe.tolist() == [[0, 1, 0, 1, 0, 1]]

    def test_class_embedding_disabled_ignores_classes(self):
        m = Seq2Seq(vanilla_config(0))
        a = m.embed_sequence([4, 5, 6], [0, 0, 0]).data
        b = m.embed_sequence([4, 5, 6], [1, 0, 1]).data
        assert np.array_equal(a, b)

    def test_class_embedding_added(self):
        m, _ = tiny_umst()
        a = m.embed_sequence([4, 5], [0, 0]).data
        b = m.embed_sequence([4, 5], [1, 0]).data
        table = m.class_embed.table.data
        assert np.allclose(b[0] - a[0], table[1] - table[0]) and np.array_equal(a[1], b[1])

    def test_deterministic(self):
        m, _ = tiny_umst()
        assert np.array_equal(m.embed_sequence([4, 5], [1, 1]).data,
                              m.embed_sequence([4, 5], [1, 1]).data)

    def test_errors(self):
        m, _ = tiny_umst()
        with pytest.raises(IndexError):
            m.embed_sequence([4, 99], [0, 0])
        with pytest.raises(ValueError):
            m.embed_sequence([4, 5], [0])


class TestEncoder:
    @pytest.mark.parametrize("flags", [
        {}, dict(use_wgcn=False), dict(use_pgcn=False), dict(use_branch2=False),
        dict(wgcn_impl="pool"), dict(use_class_embedding=False), dict(upsample_mode="linear"),
        dict(sharing="across_blocks"), dict(sharing="within_block"), dict(share_qk=True),
    ])
    def test_output_shape(self, flags):
        m, ex = tiny_umst(**flags)
        ops = StructureOperators.pack([ex.structure])
        assert m.encode(ex.src_ids, ex.classes, ops).shape == (5, 8)

    def test_zero_layers(self):
        m, ex = tiny_umst(n_enc_layers=0)
        ops = StructureOperators.pack([ex.structure])
        x = m.embed_sequence(ex.src_ids, ex.classes)
        want = T.layer_norm(x, m.enc_ln.gamma, m.enc_ln.beta, m.cfg.ln_eps).data
        assert np.array_equal(m.encode(ex.src_ids, ex.classes, ops).data, want)

    def test_residual_identity(self):
        m, ex = tiny_umst(n_enc_layers=1)
        blk = m.encoder[0]
        blk.rsan.wo.value.data[:] = 0
        blk.ffn.w2.value.data[:] = 0
        x = T.Tensor(np.random.default_rng(0).normal(size=(5, 8)))
        assert np.array_equal(blk.forward(x, StructureOperators.pack([ex.structure])).data, x.data)

    def test_length_mismatch(self):
        m, ex = tiny_umst()
        with pytest.raises(ValueError):
            m.encode(ex.src_ids[:4], ex.classes[:4], StructureOperators.pack([ex.structure]))

    def test_disabled_parts_hold_no_parameters(self):
        names = set(Seq2Seq(vanilla_config(0)).named_parameters())
        assert not any("gcn" in n or "wq2" in n or "class" in n for n in names)
        m, _ = tiny_umst(use_branch2=False)
        assert not any("gcn_phrase" in n for n in m.named_parameters())

    def test_sharing_across_blocks_two_matrices(self):
        m = Seq2Seq(ModelConfig(d_model=8, n_enc_layers=6, sharing="across_blocks"))
        assert len(m.gcn_weights()) == 2

    def test_sharing_within_block_six_matrices(self):
        m = Seq2Seq(ModelConfig(d_model=8, n_enc_layers=6, sharing="within_block"))
        assert len(m.gcn_weights()) == 6
        assert len(Seq2Seq(ModelConfig(d_model=8, n_enc_layers=6)).gcn_weights()) == 12

    def test_share_qk_saves_two_matrices_per_block(self):
        a = Seq2Seq(ModelConfig(d_model=8, n_enc_layers=3)).num_parameters()
        b = Seq2Seq(ModelConfig(d_model=8, n_enc_layers=3, share_qk=True)).num_parameters()
        assert a - b == 3 * 2 * 8 * 8


class TestDegeneracy:
    @pytest.mark.parametrize("seed", range(5))
    def test_flags_off_matches_reference(self, seed):
        cfg = vanilla_config(seed)
        m = Seq2Seq(cfg)
        ex = sentence([0, 0, 1, 2, 2, 2, 3], [(0, 3)], seed, cfg.src_vocab_size)
        got = m.seq2seq_logits(ex.src_ids, ex.structure, [4, 5, 6]).data
        params = {n: p.data for n, p in m.named_parameters().items()}
        want = vanilla_logits(params, ex.src_ids, np.array([BOS, 4, 5, 6]), cfg.d_model,
                              cfg.n_heads, cfg.n_enc_layers, cfg.n_dec_layers, cfg.ln_eps)
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_structure_is_irrelevant_when_flags_off(self):
        m = Seq2Seq(vanilla_config(1))
        a = sentence([0, 0, 1, 2], [(0, 1)])
        b = sentence([0, 1, 2, 3])
        la = m.seq2seq_logits(a.src_ids, a.structure, [4]).data
        lb = m.seq2seq_logits(a.src_ids, b.structure, [4]).data
        assert np.array_equal(la, lb)

    def test_structure_matters_when_flags_on(self):
        m, _ = tiny_umst()
        a, b = sentence([0, 0, 1, 2, 2], [(0, 2)]), sentence([0, 1, 2, 3, 4])
        la = m.seq2seq_logits(a.src_ids, a.structure, [4], classes=[0] * 5).data
        lb = m.seq2seq_logits(a.src_ids, b.structure, [4], classes=[0] * 5).data
        assert not np.allclose(la, lb)


class TestDecoder:
    def test_logits_shape_and_softmax(self):
        m, ex = tiny_umst()
        logits = m.seq2seq_logits(ex.src_ids, ex.structure, ex.tgt_ids).data
        assert logits.shape == (4, 7)
        assert np.allclose(T.softmax_rows(logits).data.sum(axis=1), 1.0)

    def test_causality(self):
        m, ex = tiny_umst()
        a = m.seq2seq_logits(ex.src_ids, ex.structure, [4, 5, 6]).data
        b = m.seq2seq_logits(ex.src_ids, ex.structure, [4, 6, 3]).data
        assert np.array_equal(a[:2], b[:2]) and not np.allclose(a[2:], b[2:])

    def test_single_position_attends_to_itself(self):
        m, ex = tiny_umst()
        rec: list = []
        ops = StructureOperators.pack([ex.structure])
        mem = m.encode(ex.src_ids, ex.classes, ops)
        m.decode([BOS], [0], mem, (1,), (5,), record=rec)
        assert rec[0]["self"][0].tolist() == [[1.0]]
        for cross in rec[0]["cross"]:
            assert np.allclose(cross.sum(axis=1), 1.0, atol=1e-6)

    def test_packed_batch_matches_singles(self):
        m, _ = tiny_umst()
        exs = [sentence([0, 0, 1], seed=1), sentence([0, 1, 1, 1, 2], [(1, 2)], seed=2)]
        exs[1].tgt_ids = np.array([5, 6, 4])
        packed = m.logits(Batch.from_examples(exs, m.cfg)).data
        singles = np.vstack([m.logits(Batch.from_examples([e], m.cfg)).data for e in exs])
        assert np.allclose(packed, singles, atol=1e-12)


class TestGreedy:
    def test_eos_favoring_model_is_empty(self):
        m, ex = tiny_umst()
        table = m.tgt_embed.value.data
        table[:] = 0
        table[EOS] = 1.0
        m.dec_ln.beta.value.data[:] = 1.0
        assert m.greedy_decode([ex], 5) == [[]]

    def test_max_len_one(self):
        m, ex = tiny_umst(seed=3)
        assert len(m.greedy_decode([ex], 1)[0]) <= 1

    def test_batch_matches_single(self):
        m, _ = tiny_umst(seed=2)
        exs = [sentence([0, 0, 1], seed=1), sentence([0, 1, 1, 1, 2], seed=2)]
        assert m.greedy_decode(exs, 6) == [m.greedy_decode([e], 6)[0] for e in exs]

    def test_bad_max_len(self):
        m, ex = tiny_umst()
        with pytest.raises(ValueError):
            m.greedy_decode([ex], 0)
        assert m.greedy_decode([], 3) == []


class TestCheckpoint:
    @pytest.mark.parametrize("flags", [{}, dict(sharing="across_blocks", share_qk=True),
                                       dict(precision="float32")])
    def test_bit_exact_round_trip(self, tmp_path, flags):
        m, ex = tiny_umst(**flags)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m, {"note": "x"})
        m2, extra = load_checkpoint(path)
        assert extra == {"note": "x"} and m2.cfg == m.cfg
        for name, p in m.named_parameters().items():
            q = m2.named_parameters()[name]
            assert p.data.dtype == q.data.dtype and p.data.tobytes() == q.data.tobytes()
        save_checkpoint(tmp_path / "again.ckpt", m2, {"note": "x"})
        assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
        a = m.seq2seq_logits(ex.src_ids, ex.structure, ex.tgt_ids).data
        b = m2.seq2seq_logits(ex.src_ids, ex.structure, ex.tgt_ids).data
        assert np.array_equal(a, b)

    def test_not_a_checkpoint(self, tmp_path):
        bad = tmp_path / "x.ckpt"
        bad.write_bytes(b"hello world, definitely not a model")
        with pytest.raises(ValueError):
            load_checkpoint(bad)

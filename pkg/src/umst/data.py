"""Vocabularies, the synthetic structured translation task, and dataset files.

A data directory holds, per split (``train``, ``valid``):

* ``<split>.bpe``           one BPE-segmented source sentence per line
* ``<split>.tgt``           the reference target tokens, space separated
* ``<split>.sidecar.jsonl`` one structure object per sentence
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import BOS, EOS, PAD, UNK, Example
from .structure import (DependencyGraph, ScaleStructure, Segmentation, parse_bpe_stream,
                        randomize_adjacency, read_sidecar, shuffle_word_adjacency, write_sidecar)

SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
assert [SPECIALS.index(s) for s in SPECIALS] == [PAD, BOS, EOS, UNK]


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        toks = list(SPECIALS) + sorted(set(tokens) - set(SPECIALS))
        self.itos = toks
        self.stoi = {t: i for i, t in enumerate(toks)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] if 0 <= i < len(self.itos) else "<unk>" for i in ids]

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocab":
        if tuple(itos[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special symbols")
        v = cls.__new__(cls)
        v.itos = list(itos)
        v.stoi = {t: i for i, t in enumerate(v.itos)}
        return v


@dataclass
class Sentence:
    seg: Segmentation
    dep: DependencyGraph
    target: list[str]


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class ToyTaskSpec:
    n_word_types: int = 40
    min_pieces: int = 1
    max_pieces: int = 3
    sub_vocab_size: int = 24
    min_words: int = 3
    max_words: int = 8
    dependency: str = "random_tree"
    n_train: int = 2000
    n_valid: int = 200
    seed: int = 0
    marker: str = "@@"

    def validate(self) -> None:
        if not 1 <= self.min_pieces <= self.max_pieces:
            raise ValueError("need 1 <= min_pieces <= max_pieces")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("need 1 <= min_words <= max_words")
        if self.dependency not in ("chain", "random_tree"):
            raise ValueError(f"unknown dependency generator {self.dependency!r}")
        capacity = sum(self.sub_vocab_size ** k for k in range(self.min_pieces, self.max_pieces + 1))
        if capacity < self.n_word_types:
            raise ValueError("sub-vocabulary too small for distinct word decompositions")


def word_decompositions(spec: ToyTaskSpec) -> list[tuple[str, ...]]:
    """Fixed, distinct piece sequences for every word type."""
    rng = np.random.default_rng([spec.seed, 1])
    pieces = [f"p{i}" for i in range(spec.sub_vocab_size)]
    seen: set[tuple[str, ...]] = set()
    out = []
    while len(out) < spec.n_word_types:
        k = int(rng.integers(spec.min_pieces, spec.max_pieces + 1))
        dec = tuple(pieces[j] for j in rng.integers(0, spec.sub_vocab_size, size=k))
        if dec in seen:
            continue
        seen.add(dec)
        out.append(dec)
    return out


def _dependency_edges(n: int, kind: str, rng) -> set[tuple[int, int]]:
    if kind == "chain":
        return {(i, i + 1) for i in range(n - 1)}
    return {(int(rng.integers(0, i)), i) for i in range(1, n)}


def generate_toy_corpus(spec: ToyTaskSpec) -> dict[str, list[Sentence]]:
    """Source: sub-word pieces of random word types; target: the word types."""
    spec.validate()
    decs = word_decompositions(spec)
    rng = np.random.default_rng([spec.seed, 2])
    splits = {}
    for split, count in (("train", spec.n_train), ("valid", spec.n_valid)):
        sents = []
        for _ in range(count):
            n = int(rng.integers(spec.min_words, spec.max_words + 1))
            words = rng.integers(0, spec.n_word_types, size=n)
            tokens = []
            for w in words:
                pieces = decs[w]
                tokens += [p + spec.marker for p in pieces[:-1]] + [pieces[-1]]
            seg = parse_bpe_stream(tokens, spec.marker)
            dep = DependencyGraph(n, frozenset(_dependency_edges(n, spec.dependency, rng)))
            sents.append(Sentence(seg, dep, [f"W{int(w)}" for w in words]))
        splits[split] = sents
    return splits


# ---------------------------------------------------------------------------
# files


def write_split(directory, split: str, sentences: Sequence[Sentence]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / f"{split}.bpe", "w", encoding="utf-8", newline="\n") as fh:
        for s in sentences:
            fh.write(" ".join(s.seg.tokens) + "\n")
    with open(d / f"{split}.tgt", "w", encoding="utf-8", newline="\n") as fh:
        for s in sentences:
            fh.write(" ".join(s.target) + "\n")
    write_sidecar(d / f"{split}.sidecar.jsonl", [(s.seg, s.dep) for s in sentences])


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def read_split(directory, split: str) -> list[Sentence]:
    d = Path(directory)
    side = d / f"{split}.sidecar.jsonl"
    if not side.exists():
        raise FileNotFoundError(f"missing {side}")
    records = read_sidecar(side)
    tgt_path = d / f"{split}.tgt"
    targets = read_lines(tgt_path) if tgt_path.exists() else [""] * len(records)
    if len(targets) != len(records):
        raise ValueError(f"{tgt_path}: {len(targets)} lines but sidecar has {len(records)}")
    bpe_path = d / f"{split}.bpe"
    if bpe_path.exists():
        for i, (line, (seg, _)) in enumerate(zip(read_lines(bpe_path), records), start=1):
            if line.split() != list(seg.tokens):
                raise ValueError(f"{bpe_path}:{i}: tokens disagree with sidecar")
    return [Sentence(seg, dep, t.split()) for (seg, dep), t in zip(records, targets)]


def build_structure(seg: Segmentation, dep: DependencyGraph, word_adjacency: str = "correct",
                    density: float = 0.1, seed=None) -> ScaleStructure:
    """Scale structure with an optionally perturbed sub-word adjacency."""
    if word_adjacency == "correct":
        return ScaleStructure.build(seg, dep)
    if word_adjacency == "random":
        return ScaleStructure.build(seg, dep, A_w=randomize_adjacency(seg.L, density, seed))
    if word_adjacency == "shuffle":
        a_w, _ = shuffle_word_adjacency(seg, seed)
        return ScaleStructure.build(seg, dep, A_w=a_w)
    raise ValueError(f"unknown word adjacency mode {word_adjacency!r}")


def to_examples(sentences: Sequence[Sentence], src_vocab: Vocab, tgt_vocab: Vocab,
                word_adjacency: str = "correct", density: float = 0.1,
                seed: int = 0) -> list[Example]:
    out = []
    for i, s in enumerate(sentences):
        structure = build_structure(s.seg, s.dep, word_adjacency, density, [seed, i])
        out.append(Example(src_vocab.encode(s.seg.tokens), np.asarray(s.seg.class_flag),
                           structure, tgt_vocab.encode(s.target)))
    return out


def vocabs_from(sentences: Sequence[Sentence]) -> tuple[Vocab, Vocab]:
    src = Vocab(t for s in sentences for t in s.seg.tokens)
    tgt = Vocab(t for s in sentences for t in s.target)
    return src, tgt

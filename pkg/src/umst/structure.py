"""Sub-word / word / phrase scale matrices and their on-disk sidecar form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class MalformedSegmentation(ValueError):
    pass


class ConlluError(ValueError):
    def __init__(self, lineno: int, msg: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {msg}")


class StructureFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Segmentation:
    tokens: tuple[str, ...]
    word_index: tuple[int, ...]
    class_flag: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "word_index", tuple(int(w) for w in self.word_index))
        object.__setattr__(self, "class_flag", tuple(int(c) for c in self.class_flag))
        check_segmentation(self)

    @property
    def L(self) -> int:
        return len(self.tokens)

    @property
    def L_words(self) -> int:
        return self.word_index[-1] + 1 if self.word_index else 0

    @property
    def group_sizes(self) -> list[int]:
        return np.bincount(self.word_index, minlength=self.L_words).tolist()

    @classmethod
    def from_word_index(cls, word_index: Sequence[int], tokens: Sequence[str] | None = None):
        word_index = list(word_index)
        sizes = np.bincount(word_index) if word_index else np.zeros(0, int)
        flags = [int(sizes[w] >= 2) for w in word_index]
        if tokens is None:
            tokens = [f"t{i}" for i in range(len(word_index))]
        return cls(tuple(tokens), tuple(word_index), tuple(flags))


def check_segmentation(seg: Segmentation) -> None:
    """Raise MalformedSegmentation if any Segmentation invariant is violated."""
    n = len(seg.tokens)
    if n == 0:
        raise MalformedSegmentation("empty segmentation")
    if len(seg.word_index) != n or len(seg.class_flag) != n:
        raise MalformedSegmentation(
            f"length mismatch: {n} tokens, {len(seg.word_index)} word ids, "
            f"{len(seg.class_flag)} classes")
    wi = np.asarray(seg.word_index)
    if wi[0] != 0 or np.any(np.diff(wi) < 0) or np.any(np.diff(wi) > 1):
        raise MalformedSegmentation(f"word ids must be contiguous runs from 0: {list(wi)}")
    sizes = np.bincount(wi)
    expected = (sizes[wi] >= 2).astype(int)
    if list(expected) != list(seg.class_flag):
        raise MalformedSegmentation(
            f"class flags {list(seg.class_flag)} disagree with word structure {list(expected)}")


@dataclass(frozen=True)
class DependencyGraph:
    word_count: int
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        norm = set()
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"self-loop on word {a}")
            if not (0 <= a < self.word_count and 0 <= b < self.word_count):
                raise ValueError(f"edge ({a}, {b}) outside {self.word_count} words")
            norm.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", frozenset(norm))

    def sorted_edges(self) -> list[list[int]]:
        return [list(e) for e in sorted(self.edges)]


def parse_bpe_stream(tokens: Sequence[str], marker: str = "@@") -> Segmentation:
    """Group marker-terminated fragments with the following token into words.

    >>> parse_bpe_stream(["Inter@@", "sex", "children"]).word_index
    (0, 0, 1)
    """
    tokens = list(tokens)
    if not tokens:
        raise MalformedSegmentation("empty token stream")
    if tokens[-1].endswith(marker):
        raise MalformedSegmentation(f"sentence-final token {tokens[-1]!r} carries marker {marker!r}")
    word_index = []
    w = 0
    for i, tok in enumerate(tokens):
        word_index.append(w)
        if not tok.endswith(marker):
            w += 1
    return Segmentation.from_word_index(word_index, tokens)


def parse_conllu(lines: str | Iterable[str]) -> DependencyGraph:
    """Read one sentence of CoNLL-U and return its undirected head edges.

    Comment lines, multiword ranges (``1-2``) and empty nodes (``1.1``) are
    skipped.
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    heads: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConlluError(lineno, f"expected 10 tab-separated columns, got {len(cols)}")
        if "-" in cols[0] or "." in cols[0]:
            continue
        try:
            tid = int(cols[0])
        except ValueError:
            raise ConlluError(lineno, f"non-integer token id {cols[0]!r}") from None
        try:
            head = int(cols[6])
        except ValueError:
            raise ConlluError(lineno, f"non-integer head {cols[6]!r}") from None
        heads.append((lineno, tid, head))
    n = len(heads)
    for k, (lineno, tid, _) in enumerate(heads, start=1):
        if tid != k:
            raise ConlluError(lineno, f"token id {tid} out of sequence (expected {k})")
    edges = set()
    for lineno, tid, head in heads:
        if head < 0 or head > n:
            raise ConlluError(lineno, f"head {head} out of range for {n} words")
        if head == tid:
            raise ConlluError(lineno, f"token {tid} is its own head")
        if head > 0:
            edges.add((tid - 1, head - 1))
    return DependencyGraph(n, frozenset(edges))


def read_conllu_sentences(text: str) -> list[list[str]]:
    """Split a CoNLL-U document into per-sentence line blocks (blank-line separated)."""
    blocks, cur = [], []
    for line in text.splitlines():
        if line.strip():
            cur.append(line)
        elif cur:
            blocks.append(cur)
            cur = []
    if cur:
        blocks.append(cur)
    return blocks


def build_word_adjacency(seg: Segmentation) -> np.ndarray:
    wi = np.asarray(seg.word_index)
    a = (wi[:, None] == wi[None, :]).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    return a


def build_phrase_adjacency(dep: DependencyGraph) -> np.ndarray:
    a = np.zeros((dep.word_count, dep.word_count))
    for i, j in dep.edges:
        a[i, j] = a[j, i] = 1.0
    return a


def build_group_map(seg: Segmentation) -> np.ndarray:
    g = np.zeros((seg.L, seg.L_words))
    g[np.arange(seg.L), seg.word_index] = 1.0
    return g


def normalized_operator(adj: np.ndarray) -> np.ndarray:
    """Symmetric GCN propagation matrix D^-1/2 (A + I) D^-1/2."""
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError(f"adjacency must be square, got {adj.shape}")
    if not np.array_equal(adj, adj.T):
        raise ValueError("adjacency must be symmetric")
    a_tilde = adj + np.eye(adj.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    s = inv_sqrt[:, None] * a_tilde * inv_sqrt[None, :]
    # exact symmetry regardless of rounding order
    return 0.5 * (s + s.T)


def randomize_adjacency(n: int, density: float = 0.1, seed=None) -> np.ndarray:
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < density, k=1)
    return (upper | upper.T).astype(np.float64)


def shuffle_word_adjacency(seg: Segmentation, seed=None,
                           permutation: Sequence[int] | None = None):
    """Permute the word group sizes and lay them back down as contiguous runs.

    Returns ``(A_w', word_index')``.  An explicit ``permutation`` overrides
    the seeded one.
    """
    sizes = seg.group_sizes
    if permutation is None:
        permutation = np.random.default_rng(seed).permutation(len(sizes))
    perm = list(permutation)
    if sorted(perm) != list(range(len(sizes))):
        raise ValueError(f"not a permutation of {len(sizes)} groups: {perm}")
    new_sizes = [sizes[p] for p in perm]
    word_index = np.repeat(np.arange(len(new_sizes)), new_sizes).tolist()
    shuffled = Segmentation.from_word_index(word_index, seg.tokens)
    return build_word_adjacency(shuffled), word_index


@dataclass(frozen=True, eq=False)
class ScaleStructure:
    A_w: np.ndarray
    A_p: np.ndarray
    G: np.ndarray
    group_sizes: np.ndarray
    S_w: np.ndarray
    S_p: np.ndarray

    @property
    def L(self) -> int:
        return self.G.shape[0]

    @property
    def L_words(self) -> int:
        return self.G.shape[1]

    @property
    def word_index(self) -> np.ndarray:
        return self.G.argmax(axis=1)

    @classmethod
    def build(cls, seg: Segmentation, dep: DependencyGraph | None = None,
              A_w: np.ndarray | None = None) -> "ScaleStructure":
        """Assemble all scale matrices.  ``A_w`` may be swapped for a perturbed one."""
        if dep is None:
            dep = DependencyGraph(seg.L_words)
        if dep.word_count != seg.L_words:
            raise MalformedSegmentation(
                f"segmentation has {seg.L_words} words but parse has {dep.word_count}")
        a_w = build_word_adjacency(seg) if A_w is None else np.asarray(A_w, dtype=np.float64)
        a_p = build_phrase_adjacency(dep)
        g = build_group_map(seg)
        for arr in (a_w, a_p, g):
            arr.setflags(write=False)
        s_w, s_p = normalized_operator(a_w), normalized_operator(a_p)
        sizes = g.sum(axis=0)
        for arr in (s_w, s_p, sizes):
            arr.setflags(write=False)
        return cls(a_w, a_p, g, sizes, s_w, s_p)


# ---------------------------------------------------------------------------
# sidecar (JSON Lines) format


def serialize_structure(seg: Segmentation, dep: DependencyGraph) -> str:
    if dep.word_count != seg.L_words:
        raise StructureFormatError(
            f"segmentation has {seg.L_words} words but parse has {dep.word_count}")
    obj = {"tokens": list(seg.tokens), "word_ids": list(seg.word_index),
           "classes": list(seg.class_flag), "dep_edges": dep.sorted_edges()}
    return json.dumps(obj, ensure_ascii=False)


def parse_structure(line: str) -> tuple[Segmentation, DependencyGraph]:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise StructureFormatError(f"malformed JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise StructureFormatError("sidecar line must be a JSON object")
    missing = {"tokens", "word_ids", "classes", "dep_edges"} - obj.keys()
    if missing:
        raise StructureFormatError(f"missing keys: {sorted(missing)}")
    tokens, wids, classes = obj["tokens"], obj["word_ids"], obj["classes"]
    if not (len(tokens) == len(wids) == len(classes)):
        raise StructureFormatError(
            f"inconsistent lengths: tokens={len(tokens)} word_ids={len(wids)} classes={len(classes)}")
    try:
        seg = Segmentation(tuple(tokens), tuple(wids), tuple(classes))
    except (MalformedSegmentation, TypeError, ValueError) as exc:
        raise StructureFormatError(str(exc)) from None
    edges = []
    for e in obj["dep_edges"]:
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e)):
            raise StructureFormatError(f"bad edge {e!r}")
        if max(e) >= seg.L_words or min(e) < 0:
            raise StructureFormatError(f"edge {e} outside {seg.L_words} words")
        edges.append(tuple(e))
    try:
        dep = DependencyGraph(seg.L_words, frozenset(edges))
    except ValueError as exc:
        raise StructureFormatError(str(exc)) from None
    return seg, dep


def read_sidecar(path) -> list[tuple[Segmentation, DependencyGraph]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(parse_structure(line))
            except StructureFormatError as exc:
                raise StructureFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_sidecar(path, records: Iterable[tuple[Segmentation, DependencyGraph]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seg, dep in records:
            fh.write(serialize_structure(seg, dep) + "\n")

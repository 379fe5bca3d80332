"""Multiscale encoder building blocks: class embedding, word/phrase GCNs,
group pooling, attention up-sampling and the two-branch rectified attention.

Layer functions take a :class:`StructureOperators` bundle.  One bundle can
describe a single sentence or several sentences packed along the length
axis, in which case every operator is block diagonal and the attention
masks keep sentences apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .structure import ScaleStructure
from .tensor import DimensionError, Parameter, Tensor

UPSAMPLE_MODES = ("boundary", "paper_literal", "nearest", "linear")
MASK_VALUE = -1e9


def normal_param(name: str, shape, std: float, rng: np.random.Generator,
                 dtype=np.float64) -> Parameter:
    return Parameter(name, Tensor(rng.normal(0.0, std, size=shape).astype(dtype)))


def zeros_param(name: str, shape, dtype=np.float64) -> Parameter:
    return Parameter(name, Tensor(np.zeros(shape, dtype=dtype)))


def ones_param(name: str, shape, dtype=np.float64) -> Parameter:
    return Parameter(name, Tensor(np.ones(shape, dtype=dtype)))


# ---------------------------------------------------------------------------
# up-sampling operators


def _resize_matrix(n_out: int, n_in: int, mode: str) -> np.ndarray:
    """1-D resize of length ``n_in`` to ``n_out`` (half-pixel, align_corners=False)."""
    r = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        if mode == "nearest":
            r[i, min(int(math.floor(i * ratio)), n_in - 1)] = 1.0
        else:
            src = max((i + 0.5) * ratio - 0.5, 0.0)
            i0 = min(int(math.floor(src)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            lam = src - i0
            r[i, i0] += 1.0 - lam
            r[i, i1] += lam
    return r


def upsample_operators(G: np.ndarray, group_sizes, mode: str = "boundary"):
    """Return ``(left, right)`` with ``upsampled = left @ attn2 @ right.T``."""
    G = np.asarray(G, dtype=np.float64)
    sizes = np.asarray(group_sizes, dtype=np.float64)
    if mode == "boundary":
        return G, G / sizes[None, :]
    if mode == "paper_literal":
        return G, G
    if mode in ("nearest", "linear"):
        r = _resize_matrix(G.shape[0], G.shape[1], mode)
        return r, r
    raise ValueError(f"unknown up-sampling mode {mode!r}; expected one of {UPSAMPLE_MODES}")


def upsample_attention(attn2, G, group_sizes, mode: str = "boundary") -> Tensor:
    """Expand a word-level L'xL' attention map to sub-word level LxL."""
    left, right = upsample_operators(G, group_sizes, mode)
    attn2 = attn2 if isinstance(attn2, Tensor) else Tensor(np.asarray(attn2, dtype=np.float64))
    if attn2.shape != (left.shape[1], right.shape[1]):
        raise DimensionError("upsample_attention", attn2.shape, np.asarray(G).shape)
    dt = attn2.dtype
    return T.matmul(T.matmul(Tensor(left.astype(dt)), attn2), Tensor(right.T.astype(dt)))


def _block_diag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def _segment_mask(lengths_q: Sequence[int], lengths_k: Sequence[int], causal: bool = False,
                  dtype=np.float64) -> np.ndarray | None:
    """Additive mask: 0 inside each sentence block, MASK_VALUE elsewhere."""
    if len(lengths_q) == 1 and not causal:
        return None
    allowed = _block_diag([np.ones((a, b)) for a, b in zip(lengths_q, lengths_k)]) > 0
    if causal:
        allowed &= _block_diag([np.tril(np.ones((a, a))) for a in lengths_q]) > 0
    return np.where(allowed, 0.0, MASK_VALUE).astype(dtype)


@dataclass(frozen=True, eq=False)
class StructureOperators:
    """Constant operators consumed by the encoder, for one or more sentences."""

    S_w: np.ndarray
    S_p: np.ndarray
    G: np.ndarray
    pool: np.ndarray
    up_left: np.ndarray
    up_right_t: np.ndarray
    mask_bpe: np.ndarray | None
    mask_word: np.ndarray | None
    lengths: tuple[int, ...]
    word_lengths: tuple[int, ...]

    @property
    def L(self) -> int:
        return self.G.shape[0]

    @property
    def L_words(self) -> int:
        return self.G.shape[1]

    @classmethod
    def pack(cls, structures: Sequence[ScaleStructure], mode: str = "boundary",
             dtype=np.float64) -> "StructureOperators":
        if not structures:
            raise ValueError("no structures to pack")
        ups = [upsample_operators(s.G, s.group_sizes, mode) for s in structures]
        G = _block_diag([s.G for s in structures])
        sizes = np.concatenate([np.asarray(s.group_sizes, dtype=np.float64) for s in structures])
        lengths = tuple(s.L for s in structures)
        wlengths = tuple(s.L_words for s in structures)
        cast = lambda a: np.ascontiguousarray(a, dtype=dtype)  # noqa: E731
        return cls(
            S_w=cast(_block_diag([s.S_w for s in structures])),
            S_p=cast(_block_diag([s.S_p for s in structures])),
            G=cast(G),
            pool=cast(G.T / sizes[:, None]),
            up_left=cast(_block_diag([u[0] for u in ups])),
            up_right_t=cast(_block_diag([u[1] for u in ups]).T),
            mask_bpe=_segment_mask(lengths, lengths, dtype=dtype),
            mask_word=_segment_mask(wlengths, wlengths, dtype=dtype),
            lengths=lengths,
            word_lengths=wlengths,
        )


# ---------------------------------------------------------------------------
# parameter containers


class ClassEmbedding:
    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float64, name="class_embed"):
        self.table = normal_param(name, (2, d), 1.0 / math.sqrt(d), rng, dtype)

    def parameters(self) -> list[Parameter]:
        return [self.table]


class GcnLayer:
    def __init__(self, d: int, rng: np.random.Generator, scale_tag: str, name: str,
                 dtype=np.float64):
        if scale_tag not in ("word", "phrase", "shared"):
            raise ValueError(f"unknown GCN scale {scale_tag!r}")
        self.scale_tag = scale_tag
        self.weight = normal_param(name, (d, d), 1.0 / math.sqrt(d), rng, dtype)

    def parameters(self) -> list[Parameter]:
        return [self.weight]


class RsanParams:
    """Projections for both attention branches plus the output projection."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, prefix: str,
                 use_branch2: bool = True, share_qk: bool = False, dtype=np.float64):
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.d, self.n_heads, self.d_k = d, n_heads, d // n_heads
        std = 1.0 / math.sqrt(d)
        self.wq1 = normal_param(f"{prefix}.wq1", (d, d), std, rng, dtype)
        self.wk1 = normal_param(f"{prefix}.wk1", (d, d), std, rng, dtype)
        self.wv = normal_param(f"{prefix}.wv", (d, d), std, rng, dtype)
        self.wo = normal_param(f"{prefix}.wo", (d, d), std, rng, dtype)
        self.use_branch2 = use_branch2
        self.share_qk = share_qk
        if use_branch2 and not share_qk:
            self.wq2 = normal_param(f"{prefix}.wq2", (d, d), std, rng, dtype)
            self.wk2 = normal_param(f"{prefix}.wk2", (d, d), std, rng, dtype)
        elif use_branch2:
            self.wq2, self.wk2 = self.wq1, self.wk1
        else:
            self.wq2 = self.wk2 = None

    def parameters(self) -> list[Parameter]:
        ps = [self.wq1, self.wk1, self.wv, self.wo]
        if self.use_branch2 and not self.share_qk:
            ps += [self.wq2, self.wk2]
        return ps


# ---------------------------------------------------------------------------
# forward functions


def class_embed(classes, table) -> Tensor:
    cls = np.asarray(classes, dtype=np.int64)
    if cls.size and (cls.min() < 0 or cls.max() > 1):
        raise ValueError(f"class values must be 0 or 1, got {sorted(set(cls.tolist()))}")
    return T.take_rows(table, cls)


def _const(a: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(a if a.dtype == like.dtype else a.astype(like.dtype))


def wgcn_forward(x, S_w, W_w) -> Tensor:
    """S_w . ReLU(S_w . x . W_w); sequence length is preserved."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    S = _const(np.asarray(S_w), x)
    if S.shape != (x.shape[0], x.shape[0]):
        raise DimensionError("wgcn_forward", S.shape, x.shape)
    return T.matmul(S, T.relu(T.matmul(T.matmul(S, x), W_w)))


def wgcn_pool_forward(x, S_w) -> Tensor:
    """Weight-free replacement of the word GCN: one propagation step."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return T.matmul(_const(np.asarray(S_w), x), x)


def group_pool(x, G, group_sizes=None) -> Tensor:
    """Mean of sub-word rows per word: diag(1/sizes) . G^T . x."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    G = np.asarray(G, dtype=np.float64)
    sizes = G.sum(axis=0) if group_sizes is None else np.asarray(group_sizes, dtype=np.float64)
    if G.shape[0] != x.shape[0]:
        raise DimensionError("group_pool", G.shape, x.shape)
    return T.matmul(_const(G.T / sizes[:, None], x), x)


def _pool_with(x: Tensor, pool: np.ndarray) -> Tensor:
    return T.matmul(_const(pool, x), x)


def pgcn_forward(x_word, S_p, W_p) -> Tensor:
    """ReLU(S_p . x_word . W_p)."""
    x_word = x_word if isinstance(x_word, Tensor) else Tensor(x_word)
    S = _const(np.asarray(S_p), x_word)
    if S.shape != (x_word.shape[0], x_word.shape[0]):
        raise DimensionError("pgcn_forward", S.shape, x_word.shape)
    return T.relu(T.matmul(T.matmul(S, x_word), W_p))


def _attention_map(q: Tensor, k: Tensor, d_k: int, mask) -> Tensor:
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d_k))
    return T.softmax_rows(scores, mask)


def rsan_forward(x_bpe: Tensor, x_word: Tensor | None, ops: StructureOperators,
                 params: RsanParams, dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None,
                 record: dict | None = None) -> Tensor:
    """Two-branch attention: sub-word map averaged with the up-sampled word map.

    Values always come from ``x_bpe``.  When the word branch is disabled the
    result is ordinary multi-head self-attention.  If ``record`` is given,
    per-head maps are stored under ``"attn1"``, ``"attn2"`` and ``"fused"``.
    """
    if x_bpe.shape[0] != ops.L:
        raise DimensionError("rsan_forward", x_bpe.shape, ops.G.shape)
    branch2 = params.use_branch2 and x_word is not None
    if branch2 and x_word.shape[0] != ops.L_words:
        raise DimensionError("rsan_forward", x_word.shape, ops.G.shape)
    dk = params.d_k
    q1 = T.matmul(x_bpe, params.wq1)
    k1 = T.matmul(x_bpe, params.wk1)
    v = T.matmul(x_bpe, params.wv)
    if branch2:
        q2 = T.matmul(x_word, params.wq2)
        k2 = T.matmul(x_word, params.wk2)
        left = _const(ops.up_left, x_bpe)
        right_t = _const(ops.up_right_t, x_bpe)
    mask_bpe = None if ops.mask_bpe is None else ops.mask_bpe.astype(x_bpe.dtype, copy=False)
    mask_word = None if ops.mask_word is None else ops.mask_word.astype(x_bpe.dtype, copy=False)
    heads = []
    for h in range(params.n_heads):
        lo, hi = h * dk, (h + 1) * dk
        attn1 = _attention_map(T.slice_cols(q1, lo, hi), T.slice_cols(k1, lo, hi), dk, mask_bpe)
        fused = attn1
        if branch2:
            attn2 = _attention_map(T.slice_cols(q2, lo, hi), T.slice_cols(k2, lo, hi), dk, mask_word)
            attn2_up = T.matmul(T.matmul(left, attn2), right_t)
            fused = T.scale(T.add(attn1, attn2_up), 0.5)
        if record is not None:
            record.setdefault("attn1", []).append(attn1.data)
            record.setdefault("fused", []).append(fused.data)
            if branch2:
                record.setdefault("attn2", []).append(attn2.data)
        fused = T.dropout(fused, dropout_rate, rng)
        heads.append(T.matmul(fused, T.slice_cols(v, lo, hi)))
    out = heads[0] if len(heads) == 1 else T.concat_cols(heads)
    return T.matmul(out, params.wo)

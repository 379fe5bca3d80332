"""Encoder-decoder assembly: multiscale Pre-Norm encoder, standard decoder."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import (ClassEmbedding, GcnLayer, RsanParams, StructureOperators, UPSAMPLE_MODES,
                     _segment_mask, class_embed, normal_param, ones_param, pgcn_forward,
                     rsan_forward, wgcn_forward, wgcn_pool_forward, zeros_param)
from .structure import ScaleStructure
from .tensor import Parameter, Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SHARING_MODES = ("none", "across_blocks", "within_block")


@dataclass
class ModelConfig:
    src_vocab_size: int = 64
    tgt_vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 2
    d_ffn: int = 256
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    dropout: float = 0.1
    max_positions: int = 256
    ln_eps: float = 1e-6
    use_class_embedding: bool = True
    use_wgcn: bool = True
    use_pgcn: bool = True
    use_branch2: bool = True
    wgcn_impl: str = "gcn"
    upsample_mode: str = "boundary"
    sharing: str = "none"
    share_qk: bool = False
    precision: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.wgcn_impl not in ("gcn", "pool"):
            raise ValueError(f"wgcn_impl must be 'gcn' or 'pool', got {self.wgcn_impl!r}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ValueError(f"upsample_mode must be one of {UPSAMPLE_MODES}")
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"sharing must be one of {SHARING_MODES}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        for name in ("src_vocab_size", "tgt_vocab_size", "d_model", "n_heads", "d_ffn",
                     "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ValueError("layer counts must be non-negative")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def word_gcn_active(self) -> bool:
        return self.use_wgcn and self.wgcn_impl == "gcn"

    @property
    def phrase_gcn_active(self) -> bool:
        # the phrase GCN only feeds the word-level attention branch
        return self.use_pgcn and self.use_branch2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


def sinusoid_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : d // 2]
    return pe


class LayerNorm:
    def __init__(self, d: int, name: str, dtype, eps: float):
        self.gamma = ones_param(f"{name}.gamma", (d,), dtype)
        self.beta = zeros_param(f"{name}.beta", (d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self):
        return [self.gamma, self.beta]


class FeedForward:
    def __init__(self, d: int, f: int, name: str, rng, dtype):
        self.w1 = normal_param(f"{name}.w1", (d, f), 1.0 / math.sqrt(d), rng, dtype)
        self.b1 = zeros_param(f"{name}.b1", (f,), dtype)
        self.w2 = normal_param(f"{name}.w2", (f, d), 1.0 / math.sqrt(f), rng, dtype)
        self.b2 = zeros_param(f"{name}.b2", (d,), dtype)

    def __call__(self, x: Tensor, rate: float, rng) -> Tensor:
        hidden = T.dropout(T.relu(T.linear(x, self.w1, self.b1)), rate, rng)
        return T.linear(hidden, self.w2, self.b2)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


class Attention:
    """Plain multi-head attention (decoder self- and cross-attention)."""

    def __init__(self, d: int, n_heads: int, name: str, rng, dtype):
        std = 1.0 / math.sqrt(d)
        self.n_heads, self.d_k = n_heads, d // n_heads
        self.wq = normal_param(f"{name}.wq", (d, d), std, rng, dtype)
        self.wk = normal_param(f"{name}.wk", (d, d), std, rng, dtype)
        self.wv = normal_param(f"{name}.wv", (d, d), std, rng, dtype)
        self.wo = normal_param(f"{name}.wo", (d, d), std, rng, dtype)

    def __call__(self, xq: Tensor, xkv: Tensor, mask, rate: float, rng,
                 record: list | None = None) -> Tensor:
        q, k, v = T.matmul(xq, self.wq), T.matmul(xkv, self.wk), T.matmul(xkv, self.wv)
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.d_k, (h + 1) * self.d_k
            scores = T.scale(T.matmul(T.slice_cols(q, lo, hi), T.transpose(T.slice_cols(k, lo, hi))),
                             1.0 / math.sqrt(self.d_k))
            attn = T.softmax_rows(scores, mask)
            if record is not None:
                record.append(attn.data)
            heads.append(T.matmul(T.dropout(attn, rate, rng), T.slice_cols(v, lo, hi)))
        out = heads[0] if len(heads) == 1 else T.concat_cols(heads)
        return T.matmul(out, self.wo)

    def parameters(self):
        return [self.wq, self.wk, self.wv, self.wo]


class EncoderBlock:
    def __init__(self, cfg: ModelConfig, idx: int, rng, shared: dict):
        d, dt, name = cfg.d_model, cfg.dtype, f"enc.{idx}"
        self.ln1 = LayerNorm(d, f"{name}.ln1", dt, cfg.ln_eps)
        self.ln2 = LayerNorm(d, f"{name}.ln2", dt, cfg.ln_eps)
        self.w_word = self.w_phrase = None
        if cfg.word_gcn_active or cfg.phrase_gcn_active:
            if cfg.sharing == "across_blocks":
                self.w_word = shared.get("word") if cfg.word_gcn_active else None
                self.w_phrase = shared.get("phrase") if cfg.phrase_gcn_active else None
            elif cfg.sharing == "within_block":
                both = GcnLayer(d, rng, "shared", f"{name}.gcn_shared", dt).weight
                self.w_word = both if cfg.word_gcn_active else None
                self.w_phrase = both if cfg.phrase_gcn_active else None
            else:
                if cfg.word_gcn_active:
                    self.w_word = GcnLayer(d, rng, "word", f"{name}.gcn_word", dt).weight
                if cfg.phrase_gcn_active:
                    self.w_phrase = GcnLayer(d, rng, "phrase", f"{name}.gcn_phrase", dt).weight
        self.rsan = RsanParams(d, cfg.n_heads, rng, f"{name}.rsan", use_branch2=cfg.use_branch2,
                               share_qk=cfg.share_qk, dtype=dt)
        self.ffn = FeedForward(d, cfg.d_ffn, f"{name}.ffn", rng, dt)
        self.cfg = cfg

    def parameters(self):
        ps = self.ln1.parameters() + self.ln2.parameters()
        ps += [w for w in (self.w_word, self.w_phrase) if w is not None]
        return ps + self.rsan.parameters() + self.ffn.parameters()

    def forward(self, x: Tensor, ops: StructureOperators, rng=None, record: dict | None = None):
        cfg = self.cfg
        rate = cfg.dropout if rng is not None else 0.0
        h = self.ln1(x)
        if cfg.use_wgcn and cfg.wgcn_impl == "gcn":
            x_bpe = wgcn_forward(h, ops.S_w, self.w_word)
        elif cfg.use_wgcn:
            x_bpe = wgcn_pool_forward(h, ops.S_w)
        else:
            x_bpe = h
        x_word = None
        if cfg.use_branch2:
            x_word = T.matmul(Tensor(ops.pool.astype(h.dtype, copy=False)), x_bpe)
            if cfg.phrase_gcn_active:
                x_word = pgcn_forward(x_word, ops.S_p, self.w_phrase)
        attn = rsan_forward(x_bpe, x_word, ops, self.rsan, rate, rng, record)
        x_bar = T.add(x, T.dropout(attn, rate, rng))
        return T.add(x_bar, T.dropout(self.ffn(self.ln2(x_bar), rate, rng), rate, rng))


class DecoderBlock:
    def __init__(self, cfg: ModelConfig, idx: int, rng):
        d, dt, name = cfg.d_model, cfg.dtype, f"dec.{idx}"
        self.ln1 = LayerNorm(d, f"{name}.ln1", dt, cfg.ln_eps)
        self.ln2 = LayerNorm(d, f"{name}.ln2", dt, cfg.ln_eps)
        self.ln3 = LayerNorm(d, f"{name}.ln3", dt, cfg.ln_eps)
        self.self_attn = Attention(d, cfg.n_heads, f"{name}.self", rng, dt)
        self.cross_attn = Attention(d, cfg.n_heads, f"{name}.cross", rng, dt)
        self.ffn = FeedForward(d, cfg.d_ffn, f"{name}.ffn", rng, dt)
        self.cfg = cfg

    def parameters(self):
        return (self.ln1.parameters() + self.ln2.parameters() + self.ln3.parameters()
                + self.self_attn.parameters() + self.cross_attn.parameters()
                + self.ffn.parameters())

    def forward(self, y: Tensor, memory: Tensor, self_mask, cross_mask, rng=None,
                record: dict | None = None):
        rate = self.cfg.dropout if rng is not None else 0.0
        rec_self = record.setdefault("self", []) if record is not None else None
        rec_cross = record.setdefault("cross", []) if record is not None else None
        h = self.ln1(y)
        y = T.add(y, T.dropout(self.self_attn(h, h, self_mask, rate, rng, rec_self), rate, rng))
        y = T.add(y, T.dropout(self.cross_attn(self.ln2(y), memory, cross_mask, rate, rng, rec_cross),
                               rate, rng))
        return T.add(y, T.dropout(self.ffn(self.ln3(y), rate, rng), rate, rng))


@dataclass
class Example:
    """One sentence pair: source ids, class flags, scale structure, target ids."""

    src_ids: np.ndarray
    classes: np.ndarray
    structure: ScaleStructure
    tgt_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class Batch:
    src_ids: np.ndarray
    src_pos: np.ndarray
    classes: np.ndarray
    ops: StructureOperators
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_pos: np.ndarray
    tgt_lengths: tuple[int, ...]

    @classmethod
    def from_examples(cls, examples: Sequence[Example], cfg: ModelConfig) -> "Batch":
        src = [np.asarray(e.src_ids, dtype=np.int64) for e in examples]
        for i, (s, e) in enumerate(zip(src, examples)):
            if len(s) != e.structure.L or len(e.classes) != len(s):
                raise ValueError(f"example {i}: {len(s)} source ids, structure length "
                                 f"{e.structure.L}, {len(e.classes)} classes")
        tgt_in = [np.concatenate([[BOS], np.asarray(e.tgt_ids, dtype=np.int64)]) for e in examples]
        tgt_out = [np.concatenate([np.asarray(e.tgt_ids, dtype=np.int64), [EOS]]) for e in examples]
        ops = StructureOperators.pack([e.structure for e in examples], cfg.upsample_mode,
                                      cfg.dtype)
        return cls(
            src_ids=np.concatenate(src),
            src_pos=np.concatenate([np.arange(len(s)) for s in src]),
            classes=np.concatenate([np.asarray(e.classes, dtype=np.int64) for e in examples]),
            ops=ops,
            tgt_in=np.concatenate(tgt_in),
            tgt_out=np.concatenate(tgt_out),
            tgt_pos=np.concatenate([np.arange(len(t)) for t in tgt_in]),
            tgt_lengths=tuple(len(t) for t in tgt_in),
        )


class Seq2Seq:
    """Multiscale encoder + standard decoder with tied output embedding."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, dt = cfg.d_model, cfg.dtype
        self.src_embed = normal_param("src_embed", (cfg.src_vocab_size, d), d ** -0.5, rng, dt)
        self.tgt_embed = normal_param("tgt_embed", (cfg.tgt_vocab_size, d), d ** -0.5, rng, dt)
        self.class_embed = ClassEmbedding(d, rng, dt) if cfg.use_class_embedding else None
        shared: dict = {}
        if cfg.sharing == "across_blocks" and cfg.n_enc_layers:
            if cfg.word_gcn_active:
                shared["word"] = GcnLayer(d, rng, "word", "enc.gcn_word", dt).weight
            if cfg.phrase_gcn_active:
                shared["phrase"] = GcnLayer(d, rng, "phrase", "enc.gcn_phrase", dt).weight
        self.encoder = [EncoderBlock(cfg, i, rng, shared) for i in range(cfg.n_enc_layers)]
        self.enc_ln = LayerNorm(d, "enc.ln", dt, cfg.ln_eps)
        self.decoder = [DecoderBlock(cfg, i, rng) for i in range(cfg.n_dec_layers)]
        self.dec_ln = LayerNorm(d, "dec.ln", dt, cfg.ln_eps)
        self._positions = sinusoid_positions(cfg.max_positions, d).astype(dt)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        ps = [self.src_embed, self.tgt_embed]
        if self.class_embed is not None:
            ps += self.class_embed.parameters()
        for blk in self.encoder:
            ps += blk.parameters()
        ps += self.enc_ln.parameters()
        for blk in self.decoder:
            ps += blk.parameters()
        ps += self.dec_ln.parameters()
        seen, out = set(), []
        for p in ps:
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def gcn_weights(self) -> list[Parameter]:
        seen, out = set(), []
        for blk in self.encoder:
            for w in (blk.w_word, blk.w_phrase):
                if w is not None and id(w) not in seen:
                    seen.add(id(w))
                    out.append(w)
        return out

    # -- forward ------------------------------------------------------------

    def _positions_for(self, pos: np.ndarray) -> np.ndarray:
        if pos.size and pos.max() >= self.cfg.max_positions:
            raise ValueError(f"sequence longer than max_positions={self.cfg.max_positions}")
        return self._positions[pos]

    def embed_sequence(self, token_ids, classes, positions=None, rng=None) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if len(classes) != len(ids):
            raise ValueError(f"{len(ids)} token ids but {len(classes)} class flags")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.src_vocab_size):
            raise IndexError(f"source id out of range for vocabulary of {self.cfg.src_vocab_size}")
        pos = np.arange(len(ids)) if positions is None else np.asarray(positions)
        x = T.scale(T.take_rows(self.src_embed, ids), math.sqrt(self.cfg.d_model))
        x = T.add(x, Tensor(self._positions_for(pos)))
        if self.class_embed is not None:
            x = T.add(x, class_embed(classes, self.class_embed.table))
        rate = self.cfg.dropout if rng is not None else 0.0
        return T.dropout(x, rate, rng)

    def encode(self, src_ids, classes, ops: StructureOperators, positions=None, rng=None,
               record: list | None = None) -> Tensor:
        if len(src_ids) != ops.L:
            raise ValueError(f"{len(src_ids)} source ids but structure length {ops.L}")
        x = self.embed_sequence(src_ids, classes, positions, rng)
        for blk in self.encoder:
            rec = {} if record is not None else None
            x = blk.forward(x, ops, rng, rec)
            if record is not None:
                record.append(rec)
        return self.enc_ln(x)

    def decode(self, tgt_in, tgt_pos, memory: Tensor, tgt_lengths, src_lengths, rng=None,
               record: list | None = None) -> Tensor:
        ids = np.asarray(tgt_in, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.tgt_vocab_size):
            raise IndexError(f"target id out of range for vocabulary of {self.cfg.tgt_vocab_size}")
        if sum(src_lengths) != memory.shape[0] or sum(tgt_lengths) != len(ids):
            raise T.DimensionError("decode", (len(ids), sum(src_lengths)), memory.shape)
        dt = self.cfg.dtype
        self_mask = _segment_mask(tgt_lengths, tgt_lengths, causal=True, dtype=dt)
        cross_mask = _segment_mask(tgt_lengths, src_lengths, dtype=dt)
        y = T.scale(T.take_rows(self.tgt_embed, ids), math.sqrt(self.cfg.d_model))
        y = T.add(y, Tensor(self._positions_for(np.asarray(tgt_pos))))
        rate = self.cfg.dropout if rng is not None else 0.0
        y = T.dropout(y, rate, rng)
        for blk in self.decoder:
            rec = {} if record is not None else None
            y = blk.forward(y, memory, self_mask, cross_mask, rng, rec)
            if record is not None:
                record.append(rec)
        return self.dec_ln(y)

    def logits(self, batch: Batch, rng=None) -> Tensor:
        memory = self.encode(batch.src_ids, batch.classes, batch.ops, batch.src_pos, rng)
        out = self.decode(batch.tgt_in, batch.tgt_pos, memory, batch.tgt_lengths,
                          batch.ops.lengths, rng)
        return T.matmul(out, T.transpose(self.tgt_embed))

    def seq2seq_logits(self, src_ids, structure: ScaleStructure, tgt_ids, classes=None) -> Tensor:
        """Teacher-forced logits for a single sentence; ``tgt_ids`` excludes BOS."""
        if classes is None:
            classes = (structure.group_sizes[structure.word_index] >= 2).astype(np.int64)
        ex = Example(np.asarray(src_ids), np.asarray(classes), structure, np.asarray(tgt_ids))
        return self.logits(Batch.from_examples([ex], self.cfg))

    def greedy_decode(self, examples: Sequence[Example], max_len: int = 64) -> list[list[int]]:
        """Argmax decoding from BOS; stops at EOS or ``max_len`` tokens.

        All sentences are decoded together; finished ones keep their output.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not examples:
            return []
        with T.no_grad():
            ops = StructureOperators.pack([e.structure for e in examples], self.cfg.upsample_mode,
                                          self.cfg.dtype)
            src = np.concatenate([np.asarray(e.src_ids, dtype=np.int64) for e in examples])
            classes = np.concatenate([np.asarray(e.classes, dtype=np.int64) for e in examples])
            pos = np.concatenate([np.arange(len(e.src_ids)) for e in examples])
            memory = self.encode(src, classes, ops, pos)
            n = len(examples)
            prefix = np.full((n, 1), BOS, dtype=np.int64)
            done = np.zeros(n, dtype=bool)
            outputs: list[list[int]] = [[] for _ in range(n)]
            for step in range(max_len):
                t = prefix.shape[1]
                dec = self.decode(prefix.reshape(-1), np.tile(np.arange(t), n), memory,
                                  (t,) * n, ops.lengths)
                last = dec.data[t - 1::t]
                scores = last @ self.tgt_embed.data.T
                nxt = scores.argmax(axis=1)
                for i in range(n):
                    if done[i]:
                        continue
                    if nxt[i] == EOS:
                        done[i] = True
                    else:
                        outputs[i].append(int(nxt[i]))
                if done.all():
                    break
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        return outputs

    def attention_maps(self, example: Example) -> list[dict]:
        """Per-encoder-layer attention maps for one sentence (eval mode)."""
        ops = StructureOperators.pack([example.structure], self.cfg.upsample_mode, self.cfg.dtype)
        record: list = []
        with T.no_grad():
            self.encode(np.asarray(example.src_ids), np.asarray(example.classes), ops,
                        record=record)
        return record


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (all integers little-endian):
#   8 bytes  magic b"UMSTCKPT"
#   4 bytes  format version (uint32)
#   8 bytes  header length N (uint64)
#   N bytes  UTF-8 JSON header: {"config": {...}, "extra": {...},
#            "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
#   payload  raw little-endian array bytes, C order, at the listed offsets

CKPT_MAGIC = b"UMSTCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, model: Seq2Seq, extra: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters().items():
        arr = np.ascontiguousarray(p.data)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.cfg.to_dict(), "extra": extra or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[Seq2Seq, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    payload = memoryview(blob)[20 + hlen:]
    model = Seq2Seq(ModelConfig.from_dict(header["config"]))
    params = model.named_parameters()
    names = {e["name"] for e in header["tensors"]}
    if names != set(params):
        raise ValueError(f"{path}: parameter set does not match config "
                         f"(missing {sorted(set(params) - names)}, extra {sorted(names - set(params))})")
    for e in header["tensors"]:
        dt = np.dtype("<" + e["dtype"])
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + e["nbytes"]], dtype=dt)
        p = params[e["name"]]
        p.value.data = arr.reshape(e["shape"]).astype(p.data.dtype.newbyteorder("="), copy=True)
    return model, header["extra"]

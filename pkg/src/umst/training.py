"""Toy-scale optimization: loss, Adam, warmup/inverse-sqrt schedule, loop,
greedy evaluation and the ablation sweep."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import PAD, Batch, Example, ModelConfig, Seq2Seq, save_checkpoint
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass
class TrainConfig:
    peak_lr: float = 2e-3
    warmup_steps: int = 16000
    beta1: float = 0.9
    beta2: float = 0.997
    adam_eps: float = 1e-8
    max_steps: int = 5000
    batch_size: int = 32
    label_smoothing: float = 0.1
    clip_norm: float = 0.0
    accum_steps: int = 1
    log_interval: int = 50
    eval_interval: int = 500
    target_accuracy: float = 0.0
    word_adjacency: str = "correct"
    adjacency_density: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ValueError("batch_size and accum_steps must be >= 1")
        if self.word_adjacency not in ("correct", "random", "shuffle"):
            raise ValueError(f"unknown word_adjacency {self.word_adjacency!r}")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset."""
        base = dict(peak_lr=1.5e-3, warmup_steps=400)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# loss, schedule, optimizer


def label_smoothed_ce(logits: Tensor, targets, smoothing: float = 0.1,
                      pad_id: int | None = PAD) -> Tensor:
    """Mean cross entropy against (1-s) on gold and s/(V-1) on every other id.

    Rows whose target is ``pad_id`` carry no loss.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    tgt = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if tgt.shape != (n,):
        raise T.DimensionError("label_smoothed_ce", logits.shape, tgt.shape)
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"target id out of range for {v} classes")
    keep = np.ones(n, dtype=bool) if pad_id is None else tgt != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("no non-pad target positions")
    q = np.full((n, v), smoothing / (v - 1) if v > 1 else 0.0)
    q[np.arange(n), tgt] = 1.0 - smoothing
    q[~keep] = 0.0
    lp = T.log_softmax_rows(logits)
    return T.scale(T.sum_all(T.mul(lp, Tensor(q.astype(logits.dtype)))), -1.0 / count)


def lr_schedule(step: int, peak: float, warmup: int) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    return peak * min(step / warmup, math.sqrt(warmup / step))


def adam_step(params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.997,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; parameters without grads are skipped."""
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        p.step += 1
        t = p.step
        g = p.grad
        p.m = beta1 * p.m + (1 - beta1) * g
        p.v = beta2 * p.v + (1 - beta2) * g * g
        m_hat = p.m / (1 - beta1 ** t)
        v_hat = p.v / (1 - beta2 ** t)
        p.value.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.value.grad = p.grad * p.data.dtype.type(factor)
    return total


# ---------------------------------------------------------------------------
# evaluation


def eval_accuracy(model: Seq2Seq, examples: Sequence[Example], batch_size: int = 100,
                  decode: Callable | None = None) -> tuple[float, float]:
    """Token and sequence accuracy of greedy output against the references.

    Token accuracy counts reference positions matched by the hypothesis at
    the same index.  ``decode`` substitutes for the model's greedy decoder.
    """
    if not examples:
        raise ValueError("empty evaluation set")
    hyps: list[list[int]] = []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        if decode is not None:
            hyps += [list(decode(e)) for e in chunk]
        else:
            max_len = max(len(e.src_ids) for e in chunk) + 2
            hyps += model.greedy_decode(chunk, max_len)
    matched = total = exact = 0
    for hyp, ex in zip(hyps, examples):
        ref = [int(t) for t in ex.tgt_ids]
        matched += sum(1 for i, r in enumerate(ref) if i < len(hyp) and hyp[i] == r)
        total += len(ref)
        exact += int(hyp == ref)
    return (matched / total if total else 0.0), exact / len(examples)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    best_valid_acc: float = -1.0
    best_step: int = 0
    final_loss: float = float("nan")
    steps: int = 0


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield order[lo:lo + batch_size]


def train_loop(model: Seq2Seq, train: Sequence[Example], cfg: TrainConfig,
               valid: Sequence[Example] | None = None, out_dir=None,
               extra: dict | None = None) -> TrainResult:
    """Run ``cfg.max_steps`` optimizer updates.

    Writes ``metrics.jsonl``, ``best.ckpt`` (by validation token accuracy)
    and ``last.ckpt`` under ``out_dir`` when given.  Stops early once the
    validation accuracy reaches ``cfg.target_accuracy`` (if positive).
    """
    if not train:
        raise ValueError("empty training set")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n")
    else:
        log_fh = None
    params = model.parameters()
    order_rng = np.random.default_rng([cfg.seed, 11])
    drop_rng = np.random.default_rng([cfg.seed, 12])
    batches = _batches(len(train), cfg.batch_size, order_rng)
    result = TrainResult()
    window_loss = window_correct = window_tokens = 0.0
    window_n = 0

    def emit(rec: dict):
        result.metrics.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    try:
        for step in range(1, cfg.max_steps + 1):
            lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps)
            T.zero_grad(params)
            for _ in range(cfg.accum_steps):
                idx = next(batches)
                batch = Batch.from_examples([train[i] for i in idx], model.cfg)
                logits = model.logits(batch, rng=drop_rng)
                loss = label_smoothed_ce(logits, batch.tgt_out, cfg.label_smoothing)
                if cfg.accum_steps > 1:
                    loss = T.scale(loss, 1.0 / cfg.accum_steps)
                value = float(loss.data) * cfg.accum_steps
                if not math.isfinite(value):
                    raise TrainingDiverged(step, value)
                T.backward(loss)
                pred = logits.data.argmax(axis=1)
                window_correct += float((pred == batch.tgt_out).sum())
                window_tokens += len(batch.tgt_out)
                window_loss += value
                window_n += 1
            if cfg.clip_norm > 0:
                clip_grad_norm(params, cfg.clip_norm)
            adam_step(params, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            result.steps = step
            result.final_loss = value
            rec = None
            if step % cfg.log_interval == 0 or step == cfg.max_steps:
                rec = {"step": step, "loss": window_loss / window_n, "lr": lr,
                       "acc": window_correct / window_tokens}
                window_loss = window_correct = window_tokens = 0.0
                window_n = 0
            reached = False
            if valid and (step % cfg.eval_interval == 0 or step == cfg.max_steps):
                tok, seq = eval_accuracy(model, valid)
                rec = rec or {"step": step}
                rec.update(valid_acc=tok, valid_seq_acc=seq)
                if tok > result.best_valid_acc:
                    result.best_valid_acc, result.best_step = tok, step
                    if out is not None:
                        save_checkpoint(out / "best.ckpt", model, extra)
                reached = cfg.target_accuracy > 0 and tok >= cfg.target_accuracy
            if rec is not None:
                emit(rec)
                log.info("%s", rec)
            if reached:
                break
        if out is not None:
            save_checkpoint(out / "last.ckpt", model, extra)
            if not valid:
                save_checkpoint(out / "best.ckpt", model, extra)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result


# ---------------------------------------------------------------------------
# ablations

ABLATION_VARIANTS: dict[str, dict] = {
    "Transformer": dict(use_class_embedding=False, use_wgcn=False, use_pgcn=False,
                        use_branch2=False),
    "UMST": {},
    "w/o class-embedding": dict(use_class_embedding=False),
    "w/o intra-group interactions": dict(use_wgcn=False),
    "w/o inter-group interactions": dict(use_branch2=False),
    "w/o P-GCN only": dict(use_pgcn=False),
    "replace GCN with pooling": dict(wgcn_impl="pool"),
    "shared W_w and W_p (across blocks)": dict(sharing="across_blocks"),
    "shared W_w and W_p (within each block)": dict(sharing="within_block"),
    "shared Q, K in RSAN": dict(share_qk=True),
    "replace by nearest interpolation": dict(upsample_mode="nearest"),
    "replace by linear interpolation": dict(upsample_mode="linear"),
}


@dataclass
class AblationRow:
    variant: str
    params: int
    token_acc: float
    seq_acc: float
    final_loss: float
    status: str = "ok"


def run_ablation_suite(base: ModelConfig, train_cfg: TrainConfig,
                       train: Sequence[Example], valid: Sequence[Example],
                       variants: Sequence[str] | None = None) -> list[AblationRow]:
    """Train every variant from identical seeds and budgets; failures are recorded."""
    rows = []
    for name in variants or list(ABLATION_VARIANTS):
        cfg = dataclasses.replace(base, **ABLATION_VARIANTS[name])
        try:
            model = Seq2Seq(cfg)
            res = train_loop(model, train, train_cfg)
            tok, seq = eval_accuracy(model, valid)
            rows.append(AblationRow(name, model.num_parameters(), tok, seq, res.final_loss))
        except (TrainingDiverged, ValueError, FloatingPointError) as exc:
            rows.append(AblationRow(name, 0, float("nan"), float("nan"), float("nan"),
                                    f"failed: {exc}"))
    return rows


def ablation_tsv(rows: Sequence[AblationRow]) -> str:
    lines = ["variant\tparams\ttoken_acc\tseq_acc\tfinal_loss\tstatus"]
    for r in rows:
        lines.append(f"{r.variant}\t{r.params}\t{r.token_acc:.4f}\t{r.seq_acc:.4f}\t"
                     f"{r.final_loss:.4f}\t{r.status}")
    return "\n".join(lines) + "\n"

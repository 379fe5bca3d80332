"""Self-check suites: structure oracles, attention normalization, gradient
agreement and flag-off degeneracy.  Each returns a list of CheckResult."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import StructureOperators, rsan_forward, RsanParams, upsample_attention
from .model import BOS, Batch, Example, ModelConfig, Seq2Seq
from .reference import vanilla_logits
from .structure import (DependencyGraph, ScaleStructure, Segmentation, build_group_map,
                        build_phrase_adjacency, build_word_adjacency, normalized_operator,
                        read_sidecar)
from .training import label_smoothed_ce

SUITES = ("structure", "normalization", "gradients", "degeneracy")


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"suite": self.suite, "name": self.name, "passed": bool(self.passed),
                "detail": self.detail, "seconds": round(self.seconds, 3)}


# ---------------------------------------------------------------------------
# random inputs


def random_segmentation(rng: np.random.Generator, max_len: int = 12) -> Segmentation:
    L = int(rng.integers(1, max_len + 1))
    sizes = []
    while sum(sizes) < L:
        sizes.append(int(min(rng.integers(1, 4), L - sum(sizes))))
    return Segmentation.from_word_index(np.repeat(np.arange(len(sizes)), sizes).tolist())


def random_dependency(rng: np.random.Generator, n: int, p: float = 0.3) -> DependencyGraph:
    edges = {(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p}
    return DependencyGraph(n, frozenset(edges))


# ---------------------------------------------------------------------------
# brute-force oracles


def oracle_word_adjacency(word_index) -> np.ndarray:
    n = len(word_index)
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j and word_index[i] == word_index[j]:
                a[i, j] = 1.0
    return a


def oracle_group_map(word_index) -> np.ndarray:
    n, m = len(word_index), max(word_index) + 1
    g = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            if word_index[i] == j:
                g[i, j] = 1.0
    return g


def oracle_phrase_adjacency(n: int, edges) -> np.ndarray:
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if (i, j) in edges or (j, i) in edges:
                a[i, j] = 1.0
    return a


def oracle_normalized(a: np.ndarray) -> np.ndarray:
    a_tilde = a + np.eye(len(a))
    d_inv_sqrt = np.diag(1.0 / np.sqrt(a_tilde.sum(axis=1)))
    return d_inv_sqrt @ a_tilde @ d_inv_sqrt


def check_structure_sample(seg: Segmentation, dep: DependencyGraph, tol: float = 1e-12) -> list[str]:
    """Return a list of violated invariants (empty when everything holds)."""
    problems = []
    wi = list(seg.word_index)
    a_w = build_word_adjacency(seg)
    g = build_group_map(seg)
    a_p = build_phrase_adjacency(dep)
    if not np.array_equal(a_w, oracle_word_adjacency(wi)):
        problems.append("A_w differs from pairwise oracle")
    if not np.array_equal(g, oracle_group_map(wi)):
        problems.append("G differs from membership oracle")
    if not np.array_equal(a_p, oracle_phrase_adjacency(dep.word_count, dep.edges)):
        problems.append("A_p differs from edge-list oracle")
    if not np.array_equal(g.T @ g, np.diag(seg.group_sizes).astype(float)):
        problems.append("G^T G != diag(group_sizes)")
    if not np.array_equal(g.sum(axis=1), np.ones(seg.L)):
        problems.append("G rows not one-hot")
    for name, a in (("S_w", a_w), ("S_p", a_p)):
        s = normalized_operator(a)
        if np.max(np.abs(s - oracle_normalized(a))) > tol:
            problems.append(f"{name} differs from dense oracle")
        if np.max(np.abs(s - s.T)) > 1e-15:
            problems.append(f"{name} not symmetric")
    expected_flags = [int(seg.group_sizes[w] >= 2) for w in wi]
    if list(seg.class_flag) != expected_flags:
        problems.append("class flags inconsistent with word structure")
    return problems


# ---------------------------------------------------------------------------
# suites


def structure_suite(n_samples: int = 1000, seed: int = 0, sidecar=None) -> list[CheckResult]:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = []
    for k in range(n_samples):
        seg = random_segmentation(rng)
        dep = random_dependency(rng, seg.L_words)
        probs = check_structure_sample(seg, dep)
        if probs:
            failures.append(f"sample {k}: {'; '.join(probs)}")
    out = [CheckResult("structure", f"random oracle equivalence ({n_samples} samples)",
                       not failures, failures[0] if failures else "",
                       time.perf_counter() - t0)]
    if sidecar is not None:
        t0 = time.perf_counter()
        try:
            records = read_sidecar(sidecar)
            bad = [f"sentence {i + 1}: {'; '.join(p)}" for i, (s, d) in enumerate(records)
                   if (p := check_structure_sample(s, d))]
            out.append(CheckResult("structure", f"sidecar {sidecar}", not bad,
                                   bad[0] if bad else f"{len(records)} sentences clean",
                                   time.perf_counter() - t0))
        except (ValueError, OSError) as exc:
            out.append(CheckResult("structure", f"sidecar {sidecar}", False, str(exc),
                                   time.perf_counter() - t0))
    return out


def normalization_suite(n_configs: int = 200, seed: int = 0) -> list[CheckResult]:
    """Fused attention rows sum to one (boundary mode); literal mode copies blocks."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    negative = False
    literal_ok = True
    for _ in range(n_configs):
        seg = random_segmentation(rng, max_len=16)
        dep = random_dependency(rng, seg.L_words)
        st = ScaleStructure.build(seg, dep)
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 5))
        params = RsanParams(d, heads, rng, "chk")
        ops = StructureOperators.pack([st], "boundary")
        x_bpe = T.Tensor(rng.normal(size=(seg.L, d)))
        x_word = T.Tensor(rng.normal(size=(seg.L_words, d)))
        rec: dict = {}
        rsan_forward(x_bpe, x_word, ops, params, record=rec)
        for fused in rec["fused"]:
            worst = max(worst, float(np.max(np.abs(fused.sum(axis=1) - 1.0))))
            negative |= bool((fused < 0).any())
        wi = seg.word_index
        for attn2 in rec["attn2"]:
            lit = upsample_attention(attn2, st.G, st.group_sizes, "paper_literal").data
            literal_ok &= bool(np.array_equal(lit, attn2[np.ix_(wi, wi)]))
    secs = time.perf_counter() - t0
    return [
        CheckResult("normalization", "boundary fused rows sum to 1 +- 1e-6",
                    worst <= 1e-6 and not negative, f"max deviation {worst:.3e}", secs),
        CheckResult("normalization", "paper_literal up-sampling copies attn2 blocks exactly",
                    literal_ok, "", 0.0),
    ]


def tiny_umst(seed: int = 0, **overrides) -> tuple[Seq2Seq, Example]:
    """Smallest model that exercises every parameter group: d=8, 2 heads,
    2 encoder + 1 decoder layers, L=5 with groups [2,1,2] and one dependency edge."""
    cfg = dict(src_vocab_size=9, tgt_vocab_size=7, d_model=8, n_heads=2, d_ffn=16,
               n_enc_layers=2, n_dec_layers=1, dropout=0.0, max_positions=16, seed=seed)
    cfg.update(overrides)
    model = Seq2Seq(ModelConfig(**cfg))
    seg = Segmentation.from_word_index([0, 0, 1, 2, 2], ["a@@", "b", "c", "d@@", "e"])
    dep = DependencyGraph(3, frozenset({(0, 2)}))
    ex = Example(np.array([4, 5, 6, 7, 8]), np.array(seg.class_flag),
                 ScaleStructure.build(seg, dep), np.array([4, 5, 6]))
    return model, ex


def gradient_suite(h: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> list[CheckResult]:
    t0 = time.perf_counter()
    model, ex = tiny_umst(seed)
    batch = Batch.from_examples([ex], model.cfg)

    def closure():
        return label_smoothed_ce(model.logits(batch), batch.tgt_out, 0.1)

    report = T.finite_diff_check(closure, model.parameters(), h=h, tol=tol)
    name, err = report.worst
    ename, eerr = report.worst_entry
    return [CheckResult("gradients",
                        f"finite differences over {len(report.max_rel_error)} parameters",
                        report.passed,
                        f"worst tensor {name}: {err:.3e}; worst single entry {ename}: {eerr:.3e}",
                        time.perf_counter() - t0)]


def vanilla_config(seed: int, **kw) -> ModelConfig:
    base = dict(src_vocab_size=11, tgt_vocab_size=9, d_model=8, n_heads=2, d_ffn=16,
                n_enc_layers=2, n_dec_layers=2, dropout=0.0, max_positions=32, seed=seed,
                use_class_embedding=False, use_wgcn=False, use_pgcn=False, use_branch2=False)
    base.update(kw)
    return ModelConfig(**base)


def degeneracy_suite(n_inputs: int = 20, seed: int = 0, tol: float = 1e-12) -> list[CheckResult]:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_inputs):
        cfg = vanilla_config(seed + k)
        model = Seq2Seq(cfg)
        seg = random_segmentation(rng, max_len=10)
        dep = random_dependency(rng, seg.L_words)
        src = rng.integers(4, cfg.src_vocab_size, size=seg.L)
        tgt = rng.integers(3, cfg.tgt_vocab_size, size=int(rng.integers(1, 6)))
        with T.no_grad():
            got = model.seq2seq_logits(src, ScaleStructure.build(seg, dep), tgt).data
        params = {n: p.data for n, p in model.named_parameters().items()}
        want = vanilla_logits(params, src, np.concatenate([[BOS], tgt]), cfg.d_model,
                              cfg.n_heads, cfg.n_enc_layers, cfg.n_dec_layers, cfg.ln_eps)
        worst = max(worst, float(np.max(np.abs(got - want))))
    return [CheckResult("degeneracy", f"flags off == reference Pre-Norm ({n_inputs} inputs)",
                        worst <= tol, f"max abs diff {worst:.3e}", time.perf_counter() - t0)]


def run_suites(names, sidecar=None) -> list[CheckResult]:
    results = []
    for name in names:
        if name == "structure":
            results += structure_suite(sidecar=sidecar)
        elif name == "normalization":
            results += normalization_suite()
        elif name == "gradients":
            results += gradient_suite()
        elif name == "degeneracy":
            results += degeneracy_suite()
        else:
            raise ValueError(f"unknown suite {name!r}")
    return results

"""scikit-learn style wrapper around the sequence model.

``X`` is a list of source sentences, each given as a sidecar record
(``dict``), a ``(Segmentation, DependencyGraph)`` pair, a token list, or a
whitespace-separated BPE string.  Sentences without a parse get an empty
dependency graph.  ``y`` is a list of target token lists (or strings).
"""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .data import Sentence, to_examples, vocabs_from
from .layers import StructureOperators
from .model import ModelConfig, Seq2Seq
from .structure import DependencyGraph, Segmentation, parse_bpe_stream, parse_structure
from .training import TrainConfig, eval_accuracy, train_loop


def check_sentences(X, marker: str = "@@") -> list[tuple[Segmentation, DependencyGraph]]:
    """Coerce every accepted sentence form into a (segmentation, parse) pair."""
    if isinstance(X, (str, bytes, dict)):
        raise TypeError("X must be a sequence of sentences, not a single sentence")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], Segmentation):
            seg, dep = item
        elif isinstance(item, dict):
            seg, dep = parse_structure(json.dumps(item))
        elif isinstance(item, str):
            seg = parse_bpe_stream(item.split(), marker)
            dep = DependencyGraph(seg.L_words)
        elif isinstance(item, Sequence):
            seg = parse_bpe_stream([str(t) for t in item], marker)
            dep = DependencyGraph(seg.L_words)
        else:
            raise TypeError(f"sentence {i}: unsupported type {type(item).__name__}")
        if dep.word_count != seg.L_words:
            raise ValueError(f"sentence {i}: parse covers {dep.word_count} words, "
                             f"segmentation has {seg.L_words}")
        out.append((seg, dep))
    if not out:
        raise ValueError("X is empty")
    return out


def check_targets(y, n: int) -> list[list[str]]:
    targets = [t.split() if isinstance(t, str) else [str(v) for v in t] for t in y]
    if len(targets) != n:
        raise ValueError(f"X has {n} sentences but y has {len(targets)} targets")
    return targets


_MODEL_KEYS = ("d_model", "n_heads", "d_ffn", "n_enc_layers", "n_dec_layers", "dropout",
               "use_class_embedding", "use_wgcn", "use_pgcn", "use_branch2", "wgcn_impl",
               "upsample_mode", "sharing", "share_qk", "precision")
_TRAIN_KEYS = ("max_steps", "batch_size", "peak_lr", "warmup_steps", "label_smoothing",
               "word_adjacency", "adjacency_density")


class MultiscaleTranslator(TransformerMixin, BaseEstimator):
    """Fit a multiscale encoder-decoder on (sentence, target) pairs.

    ``transform`` returns the encoder states (one ``L x d_model`` array per
    sentence); ``predict`` returns greedy target token lists; ``score`` is
    token accuracy.
    """

    def __init__(self, d_model=64, n_heads=2, d_ffn=256, n_enc_layers=2, n_dec_layers=2,
                 dropout=0.1, use_class_embedding=True, use_wgcn=True, use_pgcn=True,
                 use_branch2=True, wgcn_impl="gcn", upsample_mode="boundary", sharing="none",
                 share_qk=False, precision="float32", max_steps=2000, batch_size=32,
                 peak_lr=1.5e-3, warmup_steps=400, label_smoothing=0.1,
                 word_adjacency="correct", adjacency_density=0.1, marker="@@",
                 random_state=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ffn = d_ffn
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.dropout = dropout
        self.use_class_embedding = use_class_embedding
        self.use_wgcn = use_wgcn
        self.use_pgcn = use_pgcn
        self.use_branch2 = use_branch2
        self.wgcn_impl = wgcn_impl
        self.upsample_mode = upsample_mode
        self.sharing = sharing
        self.share_qk = share_qk
        self.precision = precision
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.label_smoothing = label_smoothing
        self.word_adjacency = word_adjacency
        self.adjacency_density = adjacency_density
        self.marker = marker
        self.random_state = random_state

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("MultiscaleTranslator is not fitted yet; call fit first")

    def _examples(self, pairs, targets=None):
        sents = [Sentence(seg, dep, t if targets else [])
                 for (seg, dep), t in zip(pairs, targets or [None] * len(pairs))]
        return to_examples(sents, self.src_vocab_, self.tgt_vocab_, self.word_adjacency,
                           self.adjacency_density, self.random_state)

    def fit(self, X, y):
        pairs = check_sentences(X, self.marker)
        targets = check_targets(y, len(pairs))
        sents = [Sentence(seg, dep, t) for (seg, dep), t in zip(pairs, targets)]
        self.src_vocab_, self.tgt_vocab_ = vocabs_from(sents)
        longest = max(max(s.seg.L, len(s.target) + 1) for s in sents)
        mcfg = ModelConfig(src_vocab_size=len(self.src_vocab_),
                           tgt_vocab_size=len(self.tgt_vocab_),
                           max_positions=max(256, 2 * longest), seed=self.random_state,
                           **{k: getattr(self, k) for k in _MODEL_KEYS})
        tcfg = TrainConfig(seed=self.random_state, log_interval=max(1, self.max_steps),
                           eval_interval=max(1, self.max_steps),
                           **{k: getattr(self, k) for k in _TRAIN_KEYS})
        self.model_ = Seq2Seq(mcfg)
        result = train_loop(self.model_, self._examples(pairs, targets), tcfg)
        self.training_metrics_ = result.metrics
        self.n_features_in_ = self.d_model
        return self

    def transform(self, X) -> list[np.ndarray]:
        self._check_fitted()
        out = []
        for ex in self._examples(check_sentences(X, self.marker)):
            ops = StructureOperators.pack([ex.structure], self.upsample_mode,
                                          self.model_.cfg.dtype)
            with T.no_grad():
                out.append(self.model_.encode(ex.src_ids, ex.classes, ops).data.copy())
        return out

    def predict(self, X) -> list[list[str]]:
        self._check_fitted()
        examples = self._examples(check_sentences(X, self.marker))
        out = []
        for lo in range(0, len(examples), 100):
            chunk = examples[lo:lo + 100]
            hyps = self.model_.greedy_decode(chunk, max(len(e.src_ids) for e in chunk) + 2)
            out += [self.tgt_vocab_.decode(h) for h in hyps]
        return out

    def score(self, X, y) -> float:
        self._check_fitted()
        pairs = check_sentences(X, self.marker)
        targets = check_targets(y, len(pairs))
        tok, _ = eval_accuracy(self.model_, self._examples(pairs, targets))
        return tok

    def model_config(self) -> ModelConfig:
        self._check_fitted()
        return dataclasses.replace(self.model_.cfg)

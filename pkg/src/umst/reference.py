"""Plain-numpy Pre-Norm Transformer used as an oracle.

Written against raw arrays (no autodiff kernel, no packing) so that it can
check the model with every multiscale switch turned off:

    x_bar = x + SAN(LN(x));   y = x_bar + FFN(LN(x_bar))
"""

from __future__ import annotations

import numpy as np


def _ln(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _mha(xq, xkv, wq, wk, wv, wo, n_heads, causal=False):
    d = wq.shape[0]
    dk = d // n_heads
    q, k, v = xq @ wq, xkv @ wk, xkv @ wv
    outs = []
    for h in range(n_heads):
        s = slice(h * dk, (h + 1) * dk)
        scores = q[:, s] @ k[:, s].T / np.sqrt(dk)
        if causal:
            scores = np.where(np.tril(np.ones_like(scores)) > 0, scores, -np.inf)
        outs.append(_softmax(scores) @ v[:, s])
    return np.concatenate(outs, axis=1) @ wo


def _ffn(x, w1, b1, w2, b2):
    return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2


def _positions(n, d):
    out = np.zeros((n, d))
    for pos in range(n):
        for i in range(0, d, 2):
            angle = pos / 10000.0 ** (i / d)
            out[pos, i] = np.sin(angle)
            if i + 1 < d:
                out[pos, i + 1] = np.cos(angle)
    return out


def encoder_block(x, p: dict, prefix: str, n_heads: int, eps: float):
    g = lambda k: p[f"{prefix}.{k}"]  # noqa: E731
    h = _ln(x, g("ln1.gamma"), g("ln1.beta"), eps)
    x_bar = x + _mha(h, h, g("rsan.wq1"), g("rsan.wk1"), g("rsan.wv"), g("rsan.wo"), n_heads)
    h2 = _ln(x_bar, g("ln2.gamma"), g("ln2.beta"), eps)
    return x_bar + _ffn(h2, g("ffn.w1"), g("ffn.b1"), g("ffn.w2"), g("ffn.b2"))


def decoder_block(y, mem, p: dict, prefix: str, n_heads: int, eps: float):
    g = lambda k: p[f"{prefix}.{k}"]  # noqa: E731
    h = _ln(y, g("ln1.gamma"), g("ln1.beta"), eps)
    y = y + _mha(h, h, g("self.wq"), g("self.wk"), g("self.wv"), g("self.wo"), n_heads,
                 causal=True)
    h = _ln(y, g("ln2.gamma"), g("ln2.beta"), eps)
    y = y + _mha(h, mem, g("cross.wq"), g("cross.wk"), g("cross.wv"), g("cross.wo"), n_heads)
    h = _ln(y, g("ln3.gamma"), g("ln3.beta"), eps)
    return y + _ffn(h, g("ffn.w1"), g("ffn.b1"), g("ffn.w2"), g("ffn.b2"))


def vanilla_logits(params: dict, src_ids, tgt_in, d_model: int, n_heads: int,
                   n_enc: int, n_dec: int, eps: float = 1e-6):
    """Teacher-forced logits; ``tgt_in`` starts with BOS."""
    src_ids, tgt_in = np.asarray(src_ids), np.asarray(tgt_in)
    x = params["src_embed"][src_ids] * np.sqrt(d_model) + _positions(len(src_ids), d_model)
    for i in range(n_enc):
        x = encoder_block(x, params, f"enc.{i}", n_heads, eps)
    mem = _ln(x, params["enc.ln.gamma"], params["enc.ln.beta"], eps)
    y = params["tgt_embed"][tgt_in] * np.sqrt(d_model) + _positions(len(tgt_in), d_model)
    for i in range(n_dec):
        y = decoder_block(y, mem, params, f"dec.{i}", n_heads, eps)
    y = _ln(y, params["dec.ln.gamma"], params["dec.ln.beta"], eps)
    return y @ params["tgt_embed"].T


def plain_attention(x, wq, wk, wv, wo, n_heads):
    return _mha(x, x, wq, wk, wv, wo, n_heads)

"""Minimal tape-based reverse-mode autodiff over dense numpy arrays.

Every operation returns a fresh :class:`Tensor` that remembers its parents
and a closure propagating the output gradient back to them.  ``backward``
walks the recorded graph in reverse topological order.  Inputs are never
modified in place.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; each maps onto a module-level op
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


@dataclass(eq=False)
class Parameter:
    """Named trainable tensor with Adam moment slots."""

    name: str
    value: Tensor
    trainable: bool = True
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self):
        self.value.requires_grad = self.trainable
        self.value.name = self.name
        self.m = np.zeros_like(self.value.data)
        self.v = np.zeros_like(self.value.data)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.data.size)

    def zero_grad(self) -> None:
        self.value.grad = None


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.value
    return Tensor(np.asarray(x, dtype=dtype))


def _unwrap(x) -> Tensor:
    return x.value if isinstance(x, Parameter) else _as_tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs,
                  _parents=tuple(parents) if needs else (),
                  _backward=backward_fn if needs else None)


def constant(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# differentiable operations


def matmul(a, b) -> Tensor:
    a, b = _unwrap(a), _unwrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def _bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), _bw)


def transpose(a) -> Tensor:
    a = _unwrap(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose", a.shape)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a, b) -> Tensor:
    a, b = _unwrap(a), _unwrap(b)
    if a.shape != b.shape:
        raise DimensionError("add", a.shape, b.shape)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x, b) -> Tensor:
    """Add a length-n vector to every row of an m x n matrix."""
    x, b = _unwrap(x), _unwrap(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError("add_bias", x.shape, b.shape)
    return _make(x.data + b.data, (x, b),
                 lambda g: (g, g.sum(axis=0) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = _unwrap(a), _unwrap(b)
    if a.shape != b.shape:
        raise DimensionError("mul", a.shape, b.shape)

    def _bw(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), _bw)


def scale(a, c: float) -> Tensor:
    a = _unwrap(a)
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = _unwrap(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                 lambda g: (g * mask,))


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with max subtraction.

    ``mask`` is an optional additive constant (e.g. ``-1e9`` on blocked
    positions) applied before normalization.
    """
    x = _unwrap(x)
    if x.data.ndim != 2:
        raise DimensionError("softmax_rows", x.shape)
    if np.isnan(x.data).any():
        raise ValueError("softmax_rows: NaN in input")
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (x,), _bw)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis with population variance, then scale and shift."""
    x, gamma, beta = _unwrap(x), _unwrap(gamma), _unwrap(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def _bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx,
                (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None,
                g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), _bw)


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add_bias(out, b)
    return out


def take_rows(table, ids) -> Tensor:
    """Gather rows of ``table``; gradient scatter-adds into repeated rows."""
    table = _unwrap(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("take_rows", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for table of {table.shape[0]} rows")

    def _bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _make(table.data[idx], (table,), _bw)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _unwrap(x)

    def _bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), _bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_unwrap(p) for p in parts]
    if len({p.shape[0] for p in parts}) != 1:
        raise DimensionError("concat_cols", *(p.shape for p in parts))
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def _bw(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), _bw)


def sum_all(x) -> Tensor:
    x = _unwrap(x)
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape),))


def log_softmax_rows(x) -> Tensor:
    x = _unwrap(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    x = _unwrap(x)
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# reverse pass and verification


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(.) to every leaf tensor that requires grad.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``
    between steps.  Interior gradients live only for the duration of the pass.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class GradCheckReport:
    """Per-parameter agreement between analytic and numeric gradients.

    ``max_rel_error`` holds the tensor-level relative error
    ``|a - n| / (|a| + |n|)`` (2-norms) that decides ``passed``.
    ``max_entry_error`` holds the worst single-entry relative error, which
    is dominated by difference roundoff on entries near zero and is kept as a
    diagnostic only.
    """

    max_rel_error: dict[str, float]
    tol: float
    max_entry_error: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> tuple[str, float]:
        if not self.max_rel_error:
            return ("", 0.0)
        return max(self.max_rel_error.items(), key=lambda kv: kv[1])

    @property
    def worst_entry(self) -> tuple[str, float]:
        if not self.max_entry_error:
            return ("", 0.0)
        return max(self.max_entry_error.items(), key=lambda kv: kv[1])


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def tensor_relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else 0.0


def finite_diff_check(closure: Callable[[], Tensor], params: Sequence[Parameter],
                      h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``closure`` recomputes the scalar loss from the current parameter values.
    Parameters are perturbed in place and restored exactly.
    """
    zero_grad(params)
    loss = closure()
    backward(loss)
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}
    report: dict[str, float] = {}
    entries: dict[str, float] = {}
    for p in params:
        flat = p.value.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(closure().data)
            flat[i] = orig - h
            fm = float(closure().data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * h)
        a = analytic[p.name].reshape(-1)
        report[p.name] = tensor_relative_error(a, numeric)
        entries[p.name] = float(relative_error(a, numeric).max()) if a.size else 0.0
    zero_grad(params)
    return GradCheckReport(report, tol, entries)

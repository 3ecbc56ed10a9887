"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Each operation records its parents and a closure that pushes the output
gradient back to them.  ``backward`` walks the recorded graph once in
reverse topological order; gradients add up across fan-out.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
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
            if id(p) not in seen:
                stack.append((p, False))
    loss._accum(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: a._accum(-g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), fn)


def square(a: Tensor) -> Tensor:
    return _result(a.data ** 2, (a,), lambda g: a._accum(2.0 * a.data * g))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        if a.requires_grad:
            a._accum(g @ b.data.T if b.data.ndim == 2 else np.outer(g, b.data))
        if b.requires_grad:
            b._accum(a.data.T @ g if a.data.ndim == 2 else np.outer(a.data, g))

    return _result(a.data @ b.data, (a, b), fn)


def spmm(A: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    A = sp.csr_matrix(A)
    return _result(A @ x.data, (x,), lambda g: x._accum(A.T @ g))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _result(np.where(keep, a.data, 0.0), (a,), lambda g: a._accum(g * keep))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: a._accum(g * out))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: a._accum(g / a.data))


def tsum(a: Tensor) -> Tensor:
    return _result(a.data.sum(), (a,), lambda g: a._accum(np.broadcast_to(g, a.shape)))


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)))


def gather_rows(table: Tensor, idx) -> Tensor:
    """``table[idx]`` for integer row indices (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accum(full)

    return _result(table.data[idx], (table,), fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    cuts = np.cumsum([0] + sizes)

    def fn(g):
        for p, lo, hi in zip(parts, cuts[:-1], cuts[1:]):
            if p.requires_grad:
                p._accum(g[lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, fn)


def segment_max(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Column-wise max of the rows of ``x`` grouped by ``segments``.

    Ties send the gradient to the first maximal row.
    """
    segments = np.asarray(segments, dtype=np.int64)
    H = x.shape[1]
    out = np.full((n_segments, H), -np.inf)
    np.maximum.at(out, segments, x.data)
    if np.isinf(out).any():
        raise ValueError("every segment needs at least one row")
    arg = np.empty((n_segments, H), dtype=np.int64)
    for s in range(n_segments):
        rows = np.flatnonzero(segments == s)
        arg[s] = rows[np.argmax(x.data[rows], axis=0)]

    def fn(g):
        full = np.zeros_like(x.data)
        cols = np.broadcast_to(np.arange(H), arg.shape)
        np.add.at(full, (arg, cols), g)
        x._accum(full)

    return _result(out, (x,), fn)


def masked_log_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log-softmax over ``mask``; masked entries are -inf and get no gradient."""
    mask = np.asarray(mask, dtype=bool)
    if x.data.ndim == 1:
        return reshape(masked_log_softmax(reshape(x, (1, -1)), mask.reshape(1, -1)), x.shape)
    if not mask.any(axis=1).all():
        raise ValueError("every row needs at least one legal entry")
    z = np.where(mask, x.data, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    out = np.where(mask, z - lse, -np.inf)
    p = np.where(mask, np.exp(out), 0.0)

    def fn(g):
        g = np.where(mask, g, 0.0)
        x._accum(g - p * g.sum(axis=1, keepdims=True))

    return _result(out, (x,), fn)


def pick(x: Tensor, rows, cols) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), g)
        x._accum(full)

    return _result(x.data[rows, cols], (x,), fn)


def masked_entropy(logp: Tensor, mask: np.ndarray) -> Tensor:
    """Per-row entropy -sum p log p over the legal entries of log-probabilities."""
    mask = np.asarray(mask, dtype=bool)
    lp = np.where(mask, logp.data, 0.0)
    p = np.where(mask, np.exp(lp), 0.0)
    out = -(p * lp).sum(axis=-1)

    def fn(g):
        logp._accum(np.where(mask, -(lp + 1.0) * p * np.expand_dims(g, -1), 0.0))

    return _result(out, (logp,), fn)


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape if shape is not None else (fan_in, fan_out))


class Adam:
    """Adaptive-moment update with bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 lr_scale: dict[str, float] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_scale = dict(lr_scale or {})
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        """Apply one update from the current ``.grad``; returns False if skipped."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            logger.warning("non-finite gradient, update skipped")
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            lr = self.lr * self.lr_scale.get(k, 1.0)
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam/t": np.array([float(self.t)]), "adam/skipped": np.array([float(self.skipped)])}
        for k in self.params:
            out[f"adam/m/{k}"] = self.m[k]
            out[f"adam/v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam/t"][0])
        self.skipped = int(arrays["adam/skipped"][0])
        for k in self.params:
            self.m[k] = arrays[f"adam/m/{k}"].copy()
            self.v[k] = arrays[f"adam/v/{k}"].copy()


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)

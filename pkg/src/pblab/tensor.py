"""Dense rank-<=2 tensors with tape-based reverse-mode differentiation.

All model math in the package runs through :class:`Tensor`. Each op computes
its value eagerly with numpy and records a backward closure; :func:`backward`
replays the recorded ops in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with.

    Gradient checks use float64 so finite differences are not swamped by
    float32 rounding; production code never leaves float32.
    """
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=default_dtype() if not isinstance(data, np.ndarray) else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        if arr.ndim > 2:
            raise ShapeError(f"tensors are rank <= 2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy() if g.shape == t.shape else np.broadcast_to(g, t.shape).copy()
    else:
        t.grad += g


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every differentiable tensor reachable from ``root``.

    Leaf gradients accumulate across calls; intermediate gradients are
    released once propagated.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = tape or Tape.record(root)
    # non-leaf grads are transient: consumed and cleared in reverse order
    if root._backward is None:
        _accum(root, np.ones_like(root.data))
        return
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        if node._backward is None:
            continue
        g, node.grad = node.grad, None
        if g is not None:
            node._backward(g)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    if len(shape) == 1 and g.ndim == 2:
        return g.sum(axis=0)
    if len(shape) == 2 and g.ndim == 2:
        if shape[0] == 1 and shape[1] == g.shape[1]:
            return g.sum(axis=0, keepdims=True)
        if shape[1] == 1 and shape[0] == g.shape[0]:
            return g.sum(axis=1, keepdims=True)
        if shape == (1, 1):
            return g.sum().reshape(1, 1)
    if len(shape) == 1 and g.ndim == 1 and shape[0] == 1:
        return g.sum(keepdims=True)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = b

        def bw_scalar(g):
            _accum(a, g * c)

        return _make(a.data * np.asarray(c, dtype=a.data.dtype), (a,), bw_scalar)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs rank 2, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: _accum(a, g.T))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), lambda g: _accum(a, np.full(a.shape, g, dtype=a.data.dtype)))


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        _accum(a, np.full(a.shape, g / n, dtype=a.data.dtype))

    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), bw)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: _accum(a, 2.0 * a.data * g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: _accum(a, g * mask))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: _accum(a, g * (1.0 - t * t)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _make(out, (a,), bw)


def _check_finite(x: np.ndarray, what: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{what}: NaN in input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a.data, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``.

    ``weights`` (per-row, non-negative) turns the mean into a weighted mean;
    padding rows get weight 0.
    """
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    _check_finite(logits.data, "cross_entropy")
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = -logp[np.arange(n), labels]
    if weights is None:
        w = np.full(n, 1.0 / n, dtype=x.dtype)
    else:
        w = np.asarray(weights, dtype=x.dtype).reshape(-1)
        total = w.sum()
        if total <= 0:
            raise ValueError("cross_entropy weights sum to zero")
        w = w / total
    value = np.asarray((picked * w).sum(), dtype=x.dtype)

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        _accum(logits, grad * (w * g)[:, None])

    return _make(value, (logits,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalisation with learned scale and shift."""
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=0).reshape(gamma.shape))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=0).reshape(beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv / d * (d * gx - gx.sum(axis=1, keepdims=True) - xhat * (gx * xhat).sum(axis=1, keepdims=True))
            _accum(x, dx)

    return _make(out, (x, gamma, beta), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range [0, {table.shape[0]})")

    def bw(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        _accum(table, grad)

    return _make(table.data[ids], (table,), bw)


def take_rows(a: Tensor, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)

    def bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, rows, g)
        _accum(a, grad)

    return _make(a.data[rows], (a,), bw)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_seq: int, n_heads: int) -> Tensor:
    """Multi-head causal self-attention over ``n_seq`` stacked sequences.

    ``q``, ``k``, ``v`` are (n_seq*T)x d with each sequence's rows contiguous.
    Position t attends only to positions <= t of its own sequence. Heads split
    the columns evenly. The batch/head axes live only inside this op.
    """
    n, d = q.shape
    if n % n_seq or d % n_heads:
        raise ShapeError(f"cannot split {q.shape} into {n_seq} sequences x {n_heads} heads")
    t_len, dh = n // n_seq, d // n_heads

    def split(x):
        return x.reshape(n_seq, t_len, n_heads, dh).transpose(0, 2, 1, 3)

    def merge(x):
        return x.transpose(0, 2, 1, 3).reshape(n, d)

    Q, K, V = split(q.data), split(k.data), split(v.data)
    scale = 1.0 / math.sqrt(dh)
    scores = (Q @ K.transpose(0, 1, 3, 2)) * scale
    mask = np.triu(np.ones((t_len, t_len), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    P = np.exp(scores)
    P /= P.sum(axis=-1, keepdims=True)
    out = merge(P @ V)

    def bw(g):
        G = split(g)
        dV = P.transpose(0, 1, 3, 2) @ G
        dP = G @ V.transpose(0, 1, 3, 2)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
        dQ = dS @ K
        dK = dS.transpose(0, 1, 3, 2) @ Q
        _accum(q, merge(dQ))
        _accum(k, merge(dK))
        _accum(v, merge(dV))

    return _make(out.astype(q.data.dtype, copy=False), (q, k, v), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            _accum(p, g[:, lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def cols(a: Tensor, lo: int, hi: int) -> Tensor:
    def bw(g):
        grad = np.zeros_like(a.data)
        grad[:, lo:hi] = g
        _accum(a, grad)

    return _make(a.data[:, lo:hi].copy(), (a,), bw)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored out x in."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ weight.data)
        if weight.requires_grad:
            _accum(weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=0).reshape(bias.shape))

    return _make(out, parents, bw)

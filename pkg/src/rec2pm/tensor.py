"""Dense float32 tensors with reverse-mode automatic differentiation.

Just enough machinery for a small transformer: elementwise arithmetic with
limited broadcasting, 2-D matmul, row/column slicing and concatenation,
embedding-row gathers, a masked row softmax, GELU, layer normalization,
cross-entropy and MSE losses, and a decoupled-weight-decay Adam optimizer.

Every value is float32 and row-major. Slices copy. Graph construction is
single-threaded; a tensor is immutable once created except through the
optimizer, so sharing tensors across read-only evaluation threads is safe.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "GradError",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "slice_rows",
    "slice_cols",
    "concat",
    "gather_rows",
    "tsum",
    "tmean",
    "softmax",
    "gelu",
    "layer_norm",
    "cross_entropy",
    "mse",
    "backward",
    "no_grad",
    "grad_enabled",
    "AdamW",
    "adamw_update",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class GradError(RuntimeError):
    """Backward-pass misuse: non-scalar loss, missing gradient, etc."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (cheap inference forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float32 ndarray plus an optional backward closure.

    ``data`` is the value, ``grad`` (populated by :func:`backward`) has the
    same shape. Non-leaf tensors remember their parents and a closure that
    routes the output gradient to them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut out of the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad += g

    # operator sugar; float/int operands are treated as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _make(out_data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a.accumulate_grad(-g)

    return _make(-a.data, (a,), bw)


def _scale(a: Tensor, s: float) -> Tensor:
    s32 = np.float32(s)

    def bw(g):
        a.accumulate_grad(g * s32)

    return _make(a.data * s32, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(out_data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected matrix, got shape {a.shape}")

    def bw(g):
        a.accumulate_grad(np.ascontiguousarray(g.T))

    return _make(np.ascontiguousarray(a.data.T), (a,), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows[{start}:{stop}] invalid for shape {a.shape}")
    out_data = a.data[start:stop].copy()

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a.accumulate_grad(full)

    return _make(out_data, (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols[{start}:{stop}] invalid for shape {a.shape}")
    out_data = np.ascontiguousarray(a.data[:, start:stop])

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a.accumulate_grad(full)

    return _make(out_data, (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis must be 0 or 1, got {axis}")
    shapes = [p.shape for p in parts]
    if any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat: all parts must be matrices, got shapes {shapes}")
    other = 1 - axis
    if len({s[other] for s in shapes}) != 1:
        raise ShapeError(f"concat(axis={axis}): mismatched shapes {shapes}")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                piece = g[lo:hi] if axis == 0 else g[:, lo:hi]
                p.accumulate_grad(np.ascontiguousarray(piece))

    return _make(out_data, parts, bw)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Rows ``table[indices]``; backward scatter-adds (repeats accumulate)."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: table shape {table.shape}, index shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    out_data = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table.accumulate_grad(full)

    return _make(out_data, (table,), bw)


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        a.accumulate_grad(np.full_like(a.data, g))

    return _make(np.float32(a.data.sum()), (a,), bw)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        a.accumulate_grad(np.full_like(a.data, g / n))

    return _make(np.float32(a.data.mean()), (a,), bw)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax; ``mask[i, j] == False`` excludes column j from row i.

    Excluded entries are -inf pre-softmax, so their probability is exactly 0
    and no gradient flows through them. Every row must keep at least one
    allowed entry.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"softmax: expected matrix, got shape {a.shape}")
    scores = a.data
    if mask is not None:
        if mask.shape != scores.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != input shape {a.shape}")
        if not mask.any(axis=1).all():
            raise ShapeError("softmax: mask excludes every entry of some row")
        scores = np.where(mask, scores, np.float32(-np.inf))
    m = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - m)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        a.accumulate_grad(p * (g - dot))

    return _make(p, (a,), bw)


_INV_SQRT2 = np.float32(1.0 / math.sqrt(2.0))
_INV_SQRT_2PI = np.float32(1.0 / math.sqrt(2.0 * math.pi))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2)).astype(np.float32)
    out_data = x * phi

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        a.accumulate_grad(g * (phi + x * pdf))

    return _make(out_data, (a,), bw)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance (pre-affine)."""
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm: expected matrix, got shape {a.shape}")
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    y = (x - mu) * inv

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        a.accumulate_grad(inv * (g - gm - y * gym))

    return _make(y, (a,), bw)


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of integer class targets against logit rows."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected matrix, got shape {logits.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if idx.ndim != 1 or idx.size != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but target shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"cross_entropy: class index out of range [0, {v})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))).reshape(-1)
    per_row = lse - x[np.arange(n), idx]
    out_val = per_row.sum() if reduction == "sum" else per_row.mean()

    def bw(g):
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), idx] -= 1.0
        scale = g if reduction == "sum" else g / n
        logits.accumulate_grad(p * np.float32(scale))

    return _make(np.float32(out_val), (logits,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Per-element mean squared difference."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        d = diff * np.float32(2.0 * g / n)
        if a.requires_grad:
            a.accumulate_grad(d)
        if b.requires_grad:
            b.accumulate_grad(-d)

    return _make(np.float32(np.mean(diff * diff)), (a, b), bw)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    The graph is traversed in reverse topological order, each node exactly
    once and only after all of its consumers.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("loss does not require grad; nothing to differentiate")

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

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                 step: int, lr: float, betas: tuple[float, float], eps: float,
                 weight_decay: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay is applied directly to the parameter (not through the gradient),
    then the bias-corrected moment estimates drive the step.
    """
    b1, b2 = betas
    if weight_decay:
        p -= np.float32(lr * weight_decay) * p
    m *= np.float32(b1)
    m += np.float32(1.0 - b1) * g
    v *= np.float32(b2)
    v += np.float32(1.0 - b2) * (g * g)
    mhat = m / np.float32(1.0 - b1 ** step)
    vhat = v / np.float32(1.0 - b2 ** step)
    p -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(eps))


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise GradError(f"parameter {i} has no gradient; run backward first")
            adamw_update(p.data, p.grad, self._m[i], self._v[i], self.step_count,
                         self.lr, self.betas, self.eps, self.weight_decay)

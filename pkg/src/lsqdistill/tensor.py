"""Dense float64 tensors with reverse-mode automatic differentiation.

A small dynamic-graph engine: each differentiable operation returns a new
``Tensor`` carrying a backward closure over its recorded inputs, and
:func:`backward` on a scalar loss walks the graph once in reverse
topological order, accumulating gradients into every ``requires_grad``
leaf. Storage and accumulation are float64 throughout so analytic
gradients can be checked tightly against central finite differences.

Custom gradient rules (e.g. quantizers) plug in through :func:`from_op`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "from_op",
    "backward",
    "add",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "swapaxes",
    "narrow",
    "concat",
    "tensor_sum",
    "tensor_mean",
    "softmax",
    "log_softmax_values",
    "gelu",
    "layer_norm",
    "dropout",
    "embedding",
    "mse",
    "soft_cross_entropy",
    "cross_entropy",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Backward was called on something that is not a usable graph root."""


class NonFiniteError(FloatingPointError):
    """A tensor failed a finiteness check (NaN or Inf present)."""


_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher and eval forwards)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check_finite(self, what: str = "tensor") -> None:
        if not self.is_finite():
            raise NonFiniteError(f"{what} contains NaN or Inf")

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis=axis)

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def from_op(data, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build a graph node with a custom backward rule.

    ``backward_fn(grad)`` must return one gradient array per parent (or
    None to skip a parent). Recording is skipped when grads are globally
    disabled or no parent requires them, in which case the result is a
    detached constant.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) through the recorded graph.

    The loss must be a scalar produced by recorded operations. Each graph
    may be traversed once; leaves keep their accumulated ``grad`` so they
    can be reused by later forwards.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran for this graph; run a new forward first")
    if loss._backward is None:
        raise GraphError("loss is not the output of a recorded graph")

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
        for parent in node._parents:
            if parent._backward is not None and id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        fn = node._backward
        if fn is None:
            continue
        node._consumed = True
        if node.grad is None:
            continue
        grads = fn(node.grad)
        for parent, grad in zip(node._parents, grads):
            if grad is None or not parent.requires_grad:
                continue
            parent.grad = grad if parent.grad is None else parent.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def _bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return from_op(data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def _bw(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return from_op(data, (a, b), _bw)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return from_op(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style batch broadcasting on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def _bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return (ga, gb)

    return from_op(data, (a, b), _bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return from_op(data, (a,), lambda g: (g.reshape(a.data.shape),))


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    data = np.swapaxes(a.data, axis1, axis2)
    return from_op(data, (a,), lambda g: (np.swapaxes(g, axis1, axis2),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads the complement."""
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index]

    def _bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return from_op(data, (a,), _bw)


def concat(parts, axis: int) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return from_op(data, parts, _bw)


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        expanded = np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, a.data.shape).copy(),)

    return from_op(data, (a,), _bw)


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis), Tensor(1.0 / count))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalize along one axis, with max subtraction for stability."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    y = exps / exps.sum(axis=axis, keepdims=True)

    def _bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return from_op(y, (x,), _bw)


def log_softmax_values(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-ndarray log-softmax used inside the loss ops."""
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GeLU via the tanh approximation 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + _GELU_CUBIC * v**3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_CUBIC * v**2)
        dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner
        return (g * dy,)

    return from_op(y, (x,), _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine.

    Uses the population variance; ``eps`` guards the constant-row case.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat * gain.data + bias.data

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = (inv / d) * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return (dx, dgain, dbias)

    return from_op(y, (x, gain, bias), _bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; ``rate == 0`` is the identity and records nothing."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout with rate > 0 needs a random generator")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return from_op(x.data * mask, (x,), lambda g: (g * mask,))


def embedding(weights: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; backward scatter-adds per row."""
    weights = as_tensor(weights)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weights.shape[0]):
        raise ValueError(
            f"embedding id out of range [0, {weights.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    data = weights.data[ids]

    def _bw(g):
        gw = np.zeros_like(weights.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return from_op(data, (weights,), _bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse needs matching shapes, got {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    value = np.asarray((diff**2).sum() / n)

    def _bw(g):
        ga = g * (2.0 / n) * diff
        return (ga, -ga)

    return from_op(value, (a, b), _bw)


def soft_cross_entropy(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Batch-mean cross entropy between softened teacher and student rows."""
    s, t = as_tensor(student_logits), as_tensor(teacher_logits)
    if s.shape != t.shape or s.ndim != 2:
        raise ShapeError(
            f"soft_cross_entropy needs matching 2-d logits, got {s.shape} vs {t.shape}"
        )
    batch = s.shape[0]
    log_ps = log_softmax_values(s.data)
    pt = np.exp(log_softmax_values(t.data))
    value = np.asarray(-(pt * log_ps).sum() / batch)

    def _bw(g):
        ps = np.exp(log_ps)
        gs = g * (ps - pt) / batch
        row_dots = (pt * log_ps).sum(axis=-1, keepdims=True)
        gt = g * (-pt * (log_ps - row_dots)) / batch
        return (gs, gt)

    return from_op(value, (s, t), _bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log softmax probability of the true class."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs 2-d logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels must have shape ({batch},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    log_p = log_softmax_values(logits.data)
    value = np.asarray(-log_p[np.arange(batch), labels].sum() / batch)

    def _bw(g):
        p = np.exp(log_p)
        p[np.arange(batch), labels] -= 1.0
        return (g * p / batch,)

    return from_op(value, (logits,), _bw)

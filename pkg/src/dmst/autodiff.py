"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and remembers how it was produced; calling
``backward`` on a scalar result walks the recorded graph in reverse
topological order and accumulates gradients into every tensor that requires
them. Only the operations the classifier needs are provided, each with an
exact adjoint, including the simplex soft threshold (through its active-set
Jacobian) and the pairwise rotary rotation.

Everything is single threaded numpy, so a fixed seed yields bit-identical
training runs on a given platform.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInput
from .functional import gelu as _gelu_fwd
from .functional import gelu_grad as _gelu_grad
from .functional import sigmoid as _sigmoid_fwd
from .sparsify import soft_threshold_backward, soft_threshold_matrix


class Tensor:
    """An ndarray plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise InvalidInput("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; every dunder defers to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


def pow_scalar(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    data = a.data**exponent

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _node(data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backward)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    split_points = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> None:
        for part, piece in zip(parts, np.split(g, split_points, axis=axis)):
            _accumulate(part, piece)

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> None:
        full = np.zeros(a.shape)
        full[key] = g
        _accumulate(a, full)

    return _node(a.data[key], (a,), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _restore_axes(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Reinsert reduced axes so a reduction gradient broadcasts over ``shape``."""
    if axis is None:
        axes = tuple(range(len(shape)))
    elif isinstance(axis, tuple):
        axes = tuple(ax % len(shape) for ax in axis)
    else:
        axes = (axis % len(shape),)
    if not keepdims:
        expanded = list(g.shape)
        for ax in sorted(axes):
            expanded.insert(ax, 1)
        g = g.reshape(expanded)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _restore_axes(g, a.shape, axis, keepdims))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / data.size

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _restore_axes(g, a.shape, axis, keepdims) / count)

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _sigmoid_fwd(a.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * data * (1.0 - data))

    return _node(data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * (a.data > 0))

    return _node(np.maximum(a.data, 0.0), (a,), backward)


def gelu(a) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * _gelu_grad(a.data))

    return _node(_gelu_fwd(a.data), (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * data)

    return _node(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(a, data * (g - inner))

    return _node(data, (a,), backward)


def soft_threshold_rows(a, topk: int | None = None) -> Tensor:
    """Simplex soft threshold along the last axis, with the active-set adjoint."""
    a = as_tensor(a)
    flat = a.data.reshape(-1, a.shape[-1])
    out, _, active = soft_threshold_matrix(flat, topk=topk)

    def backward(g: np.ndarray) -> None:
        gflat = g.reshape(-1, a.shape[-1])
        _accumulate(a, soft_threshold_backward(gflat, active).reshape(a.shape))

    return _node(out.reshape(a.shape), (a,), backward)


def rope_rotate(a, table: np.ndarray) -> Tensor:
    """Rotate adjacent channel pairs of ``(..., n, d)`` tokens by position.

    The adjoint rotates the gradient by the negated angles (the rotation's
    transpose), so the pass is exactly norm preserving in both directions.
    """
    a = as_tensor(a)
    n, d = a.shape[-2], a.shape[-1]
    if table.shape[0] < n or table.shape[1] * 2 != d:
        raise InvalidInput(
            f"rope table {table.shape} incompatible with tokens ({n}, {d})"
        )
    angles = table[:n]
    cos, sin = np.cos(angles), np.sin(angles)

    def rotate(x: np.ndarray, s: np.ndarray) -> np.ndarray:
        even, odd = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = even * cos - odd * s
        out[..., 1::2] = even * s + odd * cos
        return out

    def backward(g: np.ndarray) -> None:
        _accumulate(a, rotate(g, -sin))

    return _node(rotate(a.data, sin), (a,), backward)


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``(B, C)`` logits against integer labels.

    The adjoint is the classic ``(softmax - onehot) / B`` scaled by the
    incoming gradient.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidInput("cross_entropy_mean expects (B, C) logits and (B,) labels")
    B = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    data = -log_probs[np.arange(B), labels].mean()

    def backward(g: np.ndarray) -> None:
        probs = np.exp(log_probs)
        probs[np.arange(B), labels] -= 1.0
        _accumulate(logits, g * probs / B)

    return _node(data, (logits,), backward)

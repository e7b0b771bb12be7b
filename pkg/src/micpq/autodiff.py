"""Minimal reverse-mode automatic differentiation over float64 arrays.

Just enough ops to express the training objective: elementwise
arithmetic with broadcasting, matmul, relu, exp, clamped log, reductions,
slicing and concatenation.  Build an expression from :class:`Tensor`
leaves, call :func:`backward` on the scalar result, and read ``.grad``
off the leaves.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    # operator sugar; wraps raw arrays/scalars as constant leaves
    def __add__(self, other):
        return add(self, _ensure(other))

    def __radd__(self, other):
        return add(_ensure(other), self)

    def __sub__(self, other):
        return add(self, neg(_ensure(other)))

    def __rsub__(self, other):
        return add(_ensure(other), neg(self))

    def __mul__(self, other):
        return mul(self, _ensure(other))

    def __rmul__(self, other):
        return mul(_ensure(other), self)

    def __truediv__(self, other):
        return div(self, _ensure(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _ensure(other))

    def __getitem__(self, key):
        return getitem(self, key)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), t.data.shape)
    t.grad = grad if t.grad is None else t.grad + grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))

    def back():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    out._backward = back
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, (a,))
    out._backward = lambda: _accumulate(a, -out.grad)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b))

    def back():
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)

    out._backward = back
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data, (a, b))

    def back():
        _accumulate(a, out.grad / b.data)
        _accumulate(b, -out.grad * a.data / (b.data * b.data))

    out._backward = back
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, (a, b))

    def back():
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)

    out._backward = back
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T, (a,))
    out._backward = lambda: _accumulate(a, out.grad.T)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), (a,))
    # subgradient at the kink is 0
    out._backward = lambda: _accumulate(a, out.grad * (a.data > 0))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), (a,))
    out._backward = lambda: _accumulate(a, out.grad * out.data)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), (a,))
    out._backward = lambda: _accumulate(a, out.grad / a.data)
    return out


def log_clamped(a: Tensor, eps: float) -> Tensor:
    """log(max(a, eps)); zero gradient where the clamp is active."""
    clamped = np.maximum(a.data, eps)
    out = Tensor(np.log(clamped), (a,))
    out._backward = lambda: _accumulate(a, out.grad * (a.data > eps) / clamped)
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data), (a,))
    out._backward = lambda: _accumulate(a, out.grad * 0.5 / out.data)
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def back():
        grad = out.grad
        if not keepdims and axis is not None:
            grad = np.expand_dims(grad, axis)
        _accumulate(a, np.broadcast_to(grad, a.data.shape))

    out._backward = back
    return out


def getitem(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key], (a,))

    def back():
        grad = np.zeros_like(a.data)
        grad[key] = out.grad
        _accumulate(a, grad)

    out._backward = back
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def back():
        start = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(start, start + size)
            _accumulate(t, out.grad[tuple(sl)])
            start += size

    out._backward = back
    return out


def backward(root: Tensor) -> None:
    """Accumulate gradients of the scalar `root` into every leaf's .grad."""
    if root.data.ndim != 0 and root.data.size != 1:
        raise ValueError("backward() expects a scalar root")
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
        for parent in node._parents:
            stack.append((parent, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()

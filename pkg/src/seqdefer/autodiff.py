"""Minimal reverse-mode autodiff over numpy arrays.

Just enough machinery to train small rejector networks: dense affine maps,
rectifier and squash nonlinearities, the numerically stable pieces the
surrogate losses need (softplus, logsumexp, exp), and concat/split for
recurrent state.  Tensors hold float64 ndarrays; backward() accumulates
gradients through a topological sweep of the recorded graph.

No broadcasting beyond numpy's own rules; gradients of broadcast operands are
summed back to the operand's shape.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph traversal -----------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss tensor")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen and p.requires_grad:
                        stack.append((p, False))
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad and t.grad is not None:
        t.grad += _unbroadcast(g, t.data.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, parents=(a, b))
    out._backward = lambda g: (_accum(a, g), _accum(b, g))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, parents=(a, b))
    out._backward = lambda g: (_accum(a, g * b.data), _accum(b, g * a.data))
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    out = Tensor(a.data @ b.data, parents=(a, b))
    out._backward = lambda g: (_accum(a, g @ b.data.T), _accum(b, a.data.T @ g))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), parents=(a,))
    out._backward = lambda g: _accum(a, g * mask)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y, parents=(a,))
    out._backward = lambda g: _accum(a, g * (1.0 - y * y))
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y, parents=(a,))
    out._backward = lambda g: _accum(a, g * y)
    return out


def softplus(a) -> Tensor:
    """ln(1 + e^x), computed stably; gradient is the logistic sigmoid."""
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data), parents=(a,))
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    out._backward = lambda g: _accum(a, g * sig)
    return out


def logsumexp(a, keepdims=True) -> Tensor:
    """logsumexp over the last axis; gradient is softmax."""
    a = as_tensor(a)
    m = np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=-1, keepdims=True)
    val = m + np.log(s)
    soft = e / s
    out = Tensor(val if keepdims else np.squeeze(val, axis=-1), parents=(a,))

    def back(g):
        gg = g if keepdims else np.expand_dims(g, -1)
        _accum(a, gg * soft)

    out._backward = back
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient is zero outside (lo, hi), where tanh-style
    saturations have vanishing true gradients anyway."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    out = Tensor(np.clip(a.data, lo, hi), parents=(a,))
    out._backward = lambda g: _accum(a, g * mask)
    return out


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data), parents=(a,))
    out._backward = lambda g: _accum(a, np.broadcast_to(g, a.data.shape).copy())
    return out


def sum_axis(a, axis, keepdims=True) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims), parents=(a,))

    def back(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    out._backward = back
    return out


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = Tensor(np.mean(a.data), parents=(a,))
    out._backward = lambda g: _accum(a, np.broadcast_to(g / n, a.data.shape).copy())
    return out


def concat(parts, axis=1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), parents=tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    out._backward = back
    return out


def split(a, sizes, axis=1) -> list[Tensor]:
    a = as_tensor(a)
    if sum(sizes) != a.data.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {a.data.shape[axis]}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        sl = [slice(None)] * a.data.ndim
        sl[axis] = slice(int(lo), int(hi))
        piece = Tensor(a.data[tuple(sl)], parents=(a,))

        def back(g, sl=tuple(sl)):
            full = np.zeros_like(a.data)
            full[sl] = g
            _accum(a, full)

        piece._backward = back
        outs.append(piece)
    return outs

"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations executed inside a ``with Tape() as tape:`` block are recorded in
order; :func:`backward` replays them in reverse to accumulate gradients.
"""
from __future__ import annotations

import numpy as np

_ACTIVE = []


class Tape:
    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """Dense float64 array node. Leaves with ``requires_grad`` collect gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}{', grad' if self.requires_grad else ''})"

    @staticmethod
    def _make(data, parents, grad_fn, op):
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite value produced by {op}")
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._grad_fn = grad_fn
            if _ACTIVE:
                _ACTIVE[-1].nodes.append(out)
        return out

    # arithmetic
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        x, y = self.data, other.data
        return Tensor._make(x * y, (self, other),
                            lambda g: (_unbroadcast(g * y, a), _unbroadcast(g * x, b)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / other)

    def __pow__(self, p):
        x = self.data
        return Tensor._make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        x, w = self.data, other.data
        return Tensor._make(x @ w, (self, other), lambda g: (g @ w.T, x.T @ g), "matmul")

    def __getitem__(self, idx):
        shape = self.shape

        def grad_fn(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), grad_fn, "getitem")

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), grad_fn, "sum")

    def mean(self, axis=None):
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    # elementwise maps
    def leaky_relu(self, alpha):
        x = self.data
        slope = np.where(x > 0, 1.0, alpha)
        return Tensor._make(x * slope, (self,), lambda g: (g * slope,), "leaky_relu")

    def relu(self):
        x = self.data
        mask = (x > 0).astype(float)
        return Tensor._make(x * mask, (self,), lambda g: (g * mask,), "relu")

    def sigmoid(self):
        s = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._make(s, (self,), lambda g: (g * s * (1.0 - s),), "sigmoid")

    def clip(self, lo, hi):
        x = self.data
        inside = ((x > lo) & (x < hi)).astype(float)
        return Tensor._make(np.clip(x, lo, hi), (self,), lambda g: (g * inside,), "clip")

    def sin(self):
        x = self.data
        return Tensor._make(np.sin(x), (self,), lambda g: (g * np.cos(x),), "sin")

    def cos(self):
        x = self.data
        return Tensor._make(np.cos(x), (self,), lambda g: (-g * np.sin(x),), "cos")

    def square(self):
        x = self.data
        return Tensor._make(x * x, (self,), lambda g: (2.0 * g * x,), "square")


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                        lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def backward(tape: Tape | None, output: Tensor, grad_output=None) -> dict:
    """Accumulate d(output)/d(leaf) for every leaf reached through ``tape``.

    Returns a mapping ``id(leaf) -> gradient array``; use :func:`grads_for`
    to line them up with a parameter list.
    """
    if tape is None or not isinstance(tape, Tape):
        raise ValueError("backward needs the Tape recorded during the forward pass")
    if not output.requires_grad:
        raise ValueError("output does not depend on any trainable tensor")
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError("grad_output required for non-scalar outputs")
        grad_output = np.ones_like(output.data)
    grads = {id(output): np.asarray(grad_output, dtype=float)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None) if node._grad_fn is not None else None
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return grads


def grads_for(params, grads: dict) -> list:
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]

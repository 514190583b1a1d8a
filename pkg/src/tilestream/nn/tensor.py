"""Dense float64 tensors with a reverse-mode gradient tape.

Every op records its parents and a closure that pushes the output gradient
back to them. ``backward`` walks the graph in reverse topological order from
a scalar. Graphs are kept after ``backward`` so repeated calls accumulate.
"""
from __future__ import annotations

import numpy as np


class GraphStateError(RuntimeError):
    """Raised when backward is requested on a tensor with no recorded graph."""


class ShapeError(ValueError):
    pass


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad, shape):
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        if self._backward is None:
            raise GraphStateError("no recorded forward graph to differentiate")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # interior gradients are local to this pass; leaves accumulate
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                    _unbroadcast(g, b.shape) if b.requires_grad else None)
        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                    _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / other)

    def reciprocal(self):
        out = 1.0 / self.data
        return Tensor._make(out, (self,), lambda g: (-g * out * out,))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(
                f"matmul inner axes differ: left axis -1 has {a.shape[-1]}, "
                f"right axis -2 has {b.shape[-2] if b.ndim > 1 else b.shape[0]}")

        def bw(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    # fold the batch axes into one matmul instead of summing after
                    gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            return ga, gb
        return Tensor._make(a.data @ b.data, (a, b), bw)

    def __pow__(self, p):
        x = self.data
        return Tensor._make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def square(self):
        return self * self

    def abs(self):
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def leaky_relu(self, slope=0.01):
        x = self.data
        pos = x > 0
        return Tensor._make(np.where(pos, x, slope * x), (self,),
                            lambda g: (np.where(pos, g, slope * g),))

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)
        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis):
        """Max along one axis; the gradient goes to the first maximal entry."""
        x = self.data
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        out = np.take_along_axis(x, idx, axis=axis).squeeze(axis)

        def bw(g):
            gx = np.zeros_like(x)
            np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
            return (gx,)
        return Tensor._make(out, (self,), bw)

    def softmax(self, axis=-1):
        x = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(x)
        out = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
        return Tensor._make(out, (self,), bw)

    # -- shape -------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,),
                            lambda g: (g.reshape(old),))

    def swapaxes(self, a1, a2):
        return Tensor._make(np.swapaxes(self.data, a1, a2), (self,),
                            lambda g: (np.swapaxes(g, a1, a2),))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, index):
        shape = self.shape

        def bw(g):
            gx = np.zeros(shape)
            np.add.at(gx, index, g)
            return (gx,)
        return Tensor._make(self.data[index], (self,), bw)

    def broadcast_to(self, shape):
        old = self.shape
        return Tensor._make(np.broadcast_to(self.data, shape).copy(), (self,),
                            lambda g: (_unbroadcast(g, old),))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        tensors, bw)


def gather_rows(x, index):
    """Batched row gather: ``out[b, ...] = x[b, index[b, ...]]``.

    ``x`` has shape (B, N, C) and ``index`` is an integer array (B, ...).
    """
    B = x.shape[0]
    bidx = np.arange(B).reshape((B,) + (1,) * (index.ndim - 1))
    bidx = np.broadcast_to(bidx, index.shape)
    return x[bidx, index]

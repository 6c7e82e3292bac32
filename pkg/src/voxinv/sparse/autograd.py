"""Tape-free reverse-mode differentiation over dense numpy arrays.

Each ``Tensor`` remembers its parents and a closure that pushes its output
gradient back to them. ``Tensor.backward`` walks the graph in reverse
topological order. Sparse structure (voxel coordinates) never carries
gradient, so sparse tensors hold one ``Tensor`` of per-row features.
"""
from contextlib import contextmanager

import numpy as np

_GRAD = {"enabled": True}


@contextmanager
def no_grad():
    prev = _GRAD["enabled"]
    _GRAD["enabled"] = False
    try:
        yield
    finally:
        _GRAD["enabled"] = prev


def grad_enabled():
    return _GRAD["enabled"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior nodes: drop the closure so arrays can be freed
                    node._backward = None
                    node._parents = ()

    # arithmetic used by loss composition
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, scalar):
        return scale(self, scalar)

    __rmul__ = __mul__


class Parameter(Tensor):
    """Learnable array with a unique name inside its model."""

    __slots__ = ()

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True, name=name)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def make_result(data, parents, backward):
    """Wrap ``data`` as a graph node when any parent needs gradient."""
    out = Tensor(data)
    if _GRAD["enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a, b):
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))

    def backward(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return make_result(a.data + b.data, (a, b), backward)


def scale(a, s):
    s = float(s)

    def backward(g):
        accumulate(a, g * s)

    return make_result(a.data * a.dtype.type(s), (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        accumulate(a, g * mask)

    return make_result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), backward)


def total(a):
    def backward(g):
        accumulate(a, np.broadcast_to(g, a.shape))

    return make_result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def take_rows(a, rows):
    """Rows ``a[rows]``; gradient scatters back (rows must be unique)."""
    rows = np.asarray(rows, dtype=np.int64)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[rows] = g
            accumulate(a, full)

    return make_result(a.data[rows], (a,), backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g

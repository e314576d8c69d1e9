"""Tape-based reverse-mode autodiff over numpy arrays.

Only the primitives the losses in this package are built from are supported:
affine maps (add / matmul), elementwise multiply, square, square root, Mish,
sum / mean reductions, concatenation and box clipping. Anything else raises
``UnsupportedPrimitiveError`` rather than silently producing wrong gradients.
"""

from __future__ import annotations

import numpy as np


class UnsupportedPrimitiveError(TypeError):
    """Raised when a computation graph uses an operation we cannot differentiate."""


def _softplus(x):
    # log(1 + e^x), stable for large |x|
    e = np.exp(-np.abs(x))
    return np.maximum(x, 0.0) + np.log1p(e)


def _mish_parts(x):
    """(mish(x), tanh(softplus(x)), sigmoid(x)) from a single exp evaluation.

    Uses tanh(softplus(x)) = w / (w + 2) with w = e^x (e^x + 2); the input is
    clamped at 30 where both factors are already 1 to machine precision.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.minimum(x, 30.0)
    np.exp(u, out=u)                 # u = e^x
    w = u + 2.0
    np.multiply(u, w, out=w)         # w = e^x (e^x + 2)
    tsp = w + 2.0
    np.divide(w, tsp, out=tsp)       # tanh(softplus(x)) = w / (w + 2)
    sig = u + 1.0
    np.divide(u, sig, out=sig)       # sigmoid(x) = e^x / (e^x + 1)
    return x * tsp, tsp, sig


def _mish(x):
    return _mish_parts(x)[0]


def _mish_grad(x):
    _, tsp, sig = _mish_parts(x)
    return tsp + x * (1.0 - tsp * tsp) * sig


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise UnsupportedPrimitiveError("division by a graph value is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def backward(self):
        """Accumulate gradients of this (scalar) node into every reachable leaf."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar loss node")
        order = []
        seen = set()
        stack = [(self, False)]
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
        for node in order:
            # scalar seed: the first `grad +=` in a vjp promotes it to an array
            node.grad = 0.0
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is not None:
                node._vjp(node.grad)


def _as_value(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _parents(*xs):
    return tuple(x for x in xs if isinstance(x, Node))


def add(a, b):
    av, bv = _as_value(a), _as_value(b)
    out = Node(av + bv, _parents(a, b))

    def vjp(g):
        if isinstance(a, Node):
            a.grad += _unbroadcast(g, av.shape)
        if isinstance(b, Node):
            b.grad += _unbroadcast(g, bv.shape)

    out._vjp = vjp
    return out


def sub(a, b):
    av, bv = _as_value(a), _as_value(b)
    out = Node(av - bv, _parents(a, b))

    def vjp(g):
        if isinstance(a, Node):
            a.grad += _unbroadcast(g, av.shape)
        if isinstance(b, Node):
            b.grad -= _unbroadcast(g, bv.shape)

    out._vjp = vjp
    return out


def mul(a, b):
    av, bv = _as_value(a), _as_value(b)
    out = Node(av * bv, _parents(a, b))

    def vjp(g):
        if isinstance(a, Node):
            a.grad += _unbroadcast(g * bv, av.shape)
        if isinstance(b, Node):
            b.grad += _unbroadcast(g * av, bv.shape)

    out._vjp = vjp
    return out


def matmul(a, b):
    av, bv = _as_value(a), _as_value(b)
    out = Node(av @ bv, _parents(a, b))

    def vjp(g):
        if isinstance(a, Node):
            ga = g @ np.swapaxes(bv, -1, -2)
            a.grad += _unbroadcast(ga, av.shape)
        if isinstance(b, Node):
            gb = np.swapaxes(av, -1, -2) @ g
            b.grad += _unbroadcast(gb, bv.shape)

    out._vjp = vjp
    return out


def _affine_vjp(x, w, b, xv, wv, bv, g):
    if isinstance(x, Node):
        x.grad += _unbroadcast(np.matmul(g, wv), xv.shape)
    if isinstance(w, Node):
        gw = np.matmul(np.swapaxes(g, -1, -2), xv)
        w.grad += _unbroadcast(gw, wv.shape)
    if isinstance(b, Node):
        if bv.ndim == 1:
            b.grad += g.reshape(-1, g.shape[-1]).sum(axis=0)
        else:
            b.grad += _unbroadcast(g.sum(axis=-2), bv.shape)


def _affine_value(xv, wv, bv):
    out = np.matmul(xv, np.swapaxes(wv, -1, -2))
    out += bv if bv.ndim == 1 else bv[..., None, :]
    return out


def affine(x, w, b):
    """x @ w^T + b for a dense layer; w is (out, in) or stacked (..., out, in),
    b is (out,) or stacked (..., out)."""
    xv, wv, bv = _as_value(x), _as_value(w), _as_value(b)
    out = Node(_affine_value(xv, wv, bv), _parents(x, w, b))

    def vjp(g):
        _affine_vjp(x, w, b, xv, wv, bv, g)

    out._vjp = vjp
    return out


def affine_mish(x, w, b):
    """Dense layer with a fused Mish activation (one graph node)."""
    xv, wv, bv = _as_value(x), _as_value(w), _as_value(b)
    pre = _affine_value(xv, wv, bv)
    val, tsp, sig = _mish_parts(pre)
    out = Node(val, _parents(x, w, b))

    def vjp(g):
        gp = (tsp + pre * (1.0 - tsp * tsp) * sig) * g
        _affine_vjp(x, w, b, xv, wv, bv, gp)

    out._vjp = vjp
    return out


def lincomb(a, b, ca, cb, shift=0.0):
    """ca * a + cb * b + shift, where ca, cb and shift are constants."""
    av, bv = _as_value(a), _as_value(b)
    out = Node(ca * av + cb * bv + shift, _parents(a, b))

    def vjp(g):
        if isinstance(a, Node):
            a.grad += _unbroadcast(ca * g, av.shape)
        if isinstance(b, Node):
            b.grad += _unbroadcast(cb * g, bv.shape)

    out._vjp = vjp
    return out


def square(a):
    av = _as_value(a)
    out = Node(av * av, _parents(a))

    def vjp(g):
        a.grad += 2.0 * av * g

    out._vjp = vjp if isinstance(a, Node) else None
    return out


def sqrt(a):
    av = _as_value(a)
    out = Node(np.sqrt(av), _parents(a))

    def vjp(g):
        a.grad += 0.5 * g / np.sqrt(av)

    out._vjp = vjp if isinstance(a, Node) else None
    return out


def mish(a):
    av = _as_value(a)
    val, tsp, sig = _mish_parts(av)
    out = Node(val, _parents(a))

    def vjp(g):
        a.grad += (tsp + av * (1.0 - tsp * tsp) * sig) * g

    out._vjp = vjp if isinstance(a, Node) else None
    return out


def nsum(a, axis=None):
    av = _as_value(a)
    out = Node(av.sum(axis=axis), _parents(a))

    def vjp(g):
        if axis is None:
            a.grad += np.broadcast_to(g, av.shape)
        else:
            a.grad += np.expand_dims(g, axis)

    out._vjp = vjp if isinstance(a, Node) else None
    return out


def nmean(a, axis=None):
    av = _as_value(a)
    n = av.size if axis is None else av.shape[axis]
    out = Node(av.mean(axis=axis), _parents(a))

    def vjp(g):
        if axis is None:
            a.grad += np.broadcast_to(g, av.shape) / n
        else:
            a.grad += np.expand_dims(g, axis) / n

    out._vjp = vjp if isinstance(a, Node) else None
    return out


def concat(parts, axis=-1):
    values = [_as_value(p) for p in parts]
    out = Node(np.concatenate(values, axis=axis), _parents(*parts))
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            if isinstance(part, Node):
                part.grad += piece

    out._vjp = vjp
    return out


def clip(a, lo, hi):
    """Box clipping; gradient is the true a.e. derivative (zero outside the box)."""
    av = _as_value(a)
    out = Node(np.clip(av, lo, hi), _parents(a))
    mask = ((av >= lo) & (av <= hi)).astype(np.float64)

    def vjp(g):
        a.grad += mask * g

    out._vjp = vjp if isinstance(a, Node) else None
    return out

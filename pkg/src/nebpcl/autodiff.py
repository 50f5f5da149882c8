"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation applied to :class:`Var` objects in
execution order; :func:`backward` walks that record in reverse. The module
level functions (``exp``, ``log``, ``segment_sum``...) accept plain arrays as
well, so model code can be written once and run with or without a tape.

Subgradient convention: ``relu`` and ``leaky_relu`` take the positive-side
slope at exactly zero.
"""

from __future__ import annotations

import numpy as np

from .errors import NotScalarLoss, ShapeMismatch

LEAKY_SLOPE = 0.01


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []
        self.params: list[Var] = []
        self._bound: dict = {}

    def param(self, value) -> Var:
        v = Var(np.asarray(value, dtype=float), self)
        self.params.append(v)
        return v

    def _record(self, value, parents, backward_fn) -> Var:
        return Var(value, self, parents, backward_fn)


class Var:
    __array_priority__ = 1000
    __slots__ = ("value", "tape", "parents", "backward_fn", "index")

    def __init__(self, value, tape, parents=(), backward_fn=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

    def __add__(self, other):
        return _binary(self, other, np.add, lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary(other, self, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)

    def __mul__(self, other):
        return _binary(self, other, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, np.divide, lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _binary(other, self, np.divide, lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __neg__(self):
        return self.tape._record(-self.value, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _val(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, fn, grad_a, grad_b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = fn(av, bv)

    def backward_fn(g):
        return (
            _unbroadcast(grad_a(g, av, bv), np.shape(av)),
            _unbroadcast(grad_b(g, av, bv), np.shape(bv)),
        )

    return tape._record(out, (a, b), backward_fn)


def _unary(x, out, dfn):
    """Record ``out = f(x)`` whose backward is ``g * dfn()`` (elementwise)."""
    if not isinstance(x, Var):
        return out
    return x.tape._record(out, (x,), lambda g: (g * dfn(),))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul {av.shape} @ {bv.shape}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def backward_fn(g):
        ga = g @ bv.T if bv.ndim == 2 else np.outer(g, bv)
        gb = av.T @ g if av.ndim == 2 else np.outer(av, g)
        return ga, gb

    return tape._record(out, (a, b), backward_fn)


def exp(x):
    out = np.exp(_val(x))
    return _unary(x, out, lambda: out)


def log(x):
    xv = _val(x)
    with np.errstate(divide="ignore"):
        out = np.log(xv)
    if not isinstance(x, Var):
        return out

    def backward_fn(g):
        # exp(log 0) = 0 downstream, so the incoming adjoint there is zero
        return (np.divide(g, xv, out=np.zeros_like(g), where=xv != 0),)

    return x.tape._record(out, (x,), backward_fn)


def leaky_relu(x, slope=LEAKY_SLOPE):
    xv = _val(x)
    out = np.where(xv >= 0, xv, slope * xv)
    return _unary(x, out, lambda: np.where(xv >= 0, 1.0, slope))


def relu(x):
    xv = _val(x)
    out = np.maximum(xv, 0.0)
    return _unary(x, out, lambda: (xv >= 0).astype(float))


def sigmoid(x):
    xv = _val(x)
    ez = np.exp(-np.abs(xv))
    out = np.where(xv >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return _unary(x, out, lambda: out * (1.0 - out))


def softplus(x):
    xv = _val(x)
    out = np.logaddexp(0.0, xv)
    return _unary(x, out, lambda: sigmoid(xv))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    xv = _val(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return x.tape._record(np.asarray(out), (x,), backward_fn)


def take(x, idx):
    """Rows ``x[idx]`` (gather along axis 0)."""
    xv = _val(x)
    out = xv[idx]
    if not isinstance(x, Var):
        return out

    def backward_fn(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        return (gx,)

    return x.tape._record(out, (x,), backward_fn)


def segment_sum(x, idx, num_segments):
    """``out[s] = sum of x[e] over e with idx[e] == s`` along axis 0."""
    xv = _val(x)
    out = np.zeros((num_segments,) + xv.shape[1:])
    np.add.at(out, idx, xv)
    if not isinstance(x, Var):
        return out
    return x.tape._record(out, (x,), lambda g: (g[idx],))


def concat(xs, axis=-1):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape._record(out, tuple(xs), backward_fn)


def where_rows(mask, x, replacement):
    """Replace rows of ``x`` where ``mask`` holds by the constant ``replacement`` rows."""
    xv = _val(x)
    out = np.where(mask[:, None], replacement, xv)
    return _unary(x, out, lambda: np.where(mask[:, None], 0.0, 1.0))


def value(x):
    return _val(x)


def backward(tape: Tape, loss: Var) -> dict:
    """Adjoints of ``loss`` with respect to every parameter registered on ``tape``.

    Returns a mapping ``Var -> ndarray``; parameters the loss does not depend
    on get an exact zero array.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss must be a Var recorded on this tape")
    if loss.value.size != 1:
        raise NotScalarLoss(f"loss has shape {loss.value.shape}")
    adj = {loss.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = adj.pop(node.index, None)
        if g is None or node.backward_fn is None:
            if g is not None:
                adj[node.index] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if isinstance(parent, Var):
                if parent.index in adj:
                    adj[parent.index] = adj[parent.index] + pg
                else:
                    adj[parent.index] = pg
    return {p: adj.get(p.index, np.zeros_like(p.value)) for p in tape.params}

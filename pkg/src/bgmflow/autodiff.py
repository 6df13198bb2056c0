"""Reverse-mode automatic differentiation on numpy arrays.

A ``Var`` wraps a float64 ndarray and, while recording is enabled,
remembers the operation that produced it.  Calling ``backward`` on a
scalar ``Var`` walks the graph in reverse topological order and
accumulates gradients into every reachable ``Var`` created with
``requires_grad=True``.  Recording is off by default so that model
evaluation outside a ``record()`` block pays no bookkeeping cost.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_RECORDING = False


@contextlib.contextmanager
def record():
    """Enable graph recording inside the block."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = True
    try:
        yield
    finally:
        _RECORDING = prev


def is_recording() -> bool:
    return _RECORDING


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Reduce a broadcasted gradient back to the operand's shape.
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Array node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")
    __array_ufunc__ = None  # keep numpy from intercepting mixed expressions

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Var, ...] = ()
        self._backprop: Callable[[np.ndarray], tuple] | None = None

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
        return float(self.data)

    def detach(self) -> "Var":
        return Var(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Var(shape={self.data.shape}{flag})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


def asvar(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(data: np.ndarray, parents: Sequence[Var], backprop) -> Var:
    out = Var(data)
    if _RECORDING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


# -- primitive operations ----------------------------------------------


def add(a, b) -> Var:
    a, b = asvar(a), asvar(b)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = asvar(a), asvar(b)
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = asvar(a), asvar(b)
    data = a.data * b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Var:
    a, b = asvar(a), asvar(b)
    data = a.data / b.data
    return _make(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def power(a, p: float) -> Var:
    a = asvar(a)
    p = float(p)
    data = a.data**p
    return _make(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Var:
    a = asvar(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a) -> Var:
    a = asvar(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Var:
    a = asvar(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,))


def sigmoid(a) -> Var:
    a = asvar(a)
    data = expit(a.data)
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


def softplus(a) -> Var:
    a = asvar(a)
    data = np.logaddexp(0.0, a.data)
    return _make(data, (a,), lambda g: (g * expit(a.data),))


def relu(a) -> Var:
    a = asvar(a)
    data = np.maximum(a.data, 0.0)
    return _make(data, (a,), lambda g: (g * (a.data > 0.0),))


def matmul(a, b) -> Var:
    a, b = asvar(a), asvar(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-d operands only")
    data = a.data @ b.data
    return _make(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = asvar(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backprop(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(data, (a,), backprop)


def vmean(a, axis=None, keepdims: bool = False) -> Var:
    a = asvar(a)
    n = a.size if axis is None else a.shape[axis]
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def cumsum(a, axis: int = -1) -> Var:
    a = asvar(a)
    data = np.cumsum(a.data, axis=axis)

    def backprop(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _make(data, (a,), backprop)


def where(cond, a, b) -> Var:
    cond = np.asarray(cond, dtype=bool)
    a, b = asvar(a), asvar(b)
    data = np.where(cond, a.data, b.data)
    return _make(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


def concatenate(parts: Sequence, axis: int = -1) -> Var:
    parts = [asvar(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backprop(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tuple(parts), backprop)


def getitem(a, key) -> Var:
    a = asvar(a)
    data = a.data[key]

    def backprop(g):
        out = np.zeros(a.shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(data, (a,), backprop)


def take_along_last(a, idx: np.ndarray) -> Var:
    """Gather along the last axis; idx broadcasts against a's leading axes."""
    a = asvar(a)
    idx = np.asarray(idx)
    data = np.take_along_axis(a.data, idx, axis=-1)

    def backprop(g):
        out = np.zeros(a.shape)
        lead = np.ix_(*[np.arange(n) for n in a.shape[:-1]])
        full = tuple(l[..., None] * np.ones_like(idx) for l in lead) if lead else ()
        np.add.at(out, full + (idx,), g)
        return (out,)

    return _make(data, (a,), backprop)


def reshape(a, *shape) -> Var:
    a = asvar(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def softmax(a, axis: int = -1) -> Var:
    a = asvar(a)
    shift = np.max(a.data, axis=axis, keepdims=True)  # detached for stability
    e = exp(a - shift)
    return e / vsum(e, axis=axis, keepdims=True)


# -- reverse pass --------------------------------------------------------


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf."""
    if not isinstance(loss, Var):
        raise TypeError("backward expects a Var")
    if loss.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any recorded parameter")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backprop is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backprop(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def gradients(loss: Var, params: Sequence[Var]) -> list[np.ndarray]:
    """Fresh gradients of a scalar loss for the given leaves."""
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

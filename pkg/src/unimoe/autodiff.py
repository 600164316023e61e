"""Reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps one ndarray plus an optional backward closure; ops build a
DAG and ``backward()`` walks it once in reverse topological order. The
engine is deliberately small: only the operations the models in this
package need, all with hand-written vector-Jacobian products. Everything
runs in float64 so central-difference gradient checks can resolve 1e-5
discrepancies without dtype noise.

Graph construction is skipped entirely when no input requires a gradient
or when inside ``no_grad()``, which keeps pure inference at plain numpy
speed.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED: list[bool] = [True]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the ``with`` block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """An ndarray with reverse-mode gradient support.

    ``data`` is always a float64 ndarray. ``grad`` is populated by
    ``backward()`` on tensors with ``requires_grad=True``. Internal nodes
    carry ``_parents`` and a ``_vjp`` closure mapping the output gradient
    to one gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, gradient: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every reachable leaf."""
        if gradient is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient requires a scalar output")
            gradient = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(gradient, dtype=np.float64) if self.grad is None \
            else self.grad + gradient
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __truediv__(self, other):
        other = _wrap(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_wrap(other), power(self, -1.0))

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _basic_index(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                          _unbroadcast(g * a.data, b.data.shape)))


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    data = a.data ** exponent
    return _node(data, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def matmul(a, b) -> Tensor:
    """Matrix product, including batched operands with broadcast batch dims."""
    a, b = _wrap(a), _wrap(b)
    data = a.data @ b.data

    def vjp(g):
        if a.data.ndim == 1 and b.data.ndim == 1:
            return g * b.data, g * a.data
        if a.data.ndim == 1:
            return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape), \
                _unbroadcast(np.einsum("i,...j->...ij", a.data, g, optimize=True), b.data.shape)
        if b.data.ndim == 1:
            return _unbroadcast(np.einsum("...i,j->...ij", g, b.data, optimize=True), a.data.shape), \
                _unbroadcast(np.swapaxes(a.data, -1, -2) @ g[..., None], b.data.shape)
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _node(data, (a, b), vjp)


# -- elementwise nonlinearities ------------------------------------------


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)
    return _node(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)
    return _node(data, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    data = np.tanh(a.data)
    return _node(data, (a,), lambda g: (g * (1.0 - data * data),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Evaluate both branches on clipped input; overflow-safe either way.
    pos = 1.0 / (1.0 + np.exp(-np.clip(x, 0.0, None)))
    ez = np.exp(np.clip(x, None, 0.0))
    neg = ez / (1.0 + ez)
    return np.where(x >= 0.0, pos, neg)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    data = _sigmoid_np(a.data)
    return _node(data, (a,), lambda g: (g * data * (1.0 - data),))


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    a = _wrap(a)
    data = np.logaddexp(0.0, a.data)
    return _node(data, (a,), lambda g: (g * _sigmoid_np(a.data),))


def silu(a) -> Tensor:
    """x * sigmoid(x); smooth enough for finite-difference checking."""
    a = _wrap(a)
    s = _sigmoid_np(a.data)
    data = a.data * s
    return _node(data, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)
    return _node(data, (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.data.shape),
                            _unbroadcast(g * ~take_a, b.data.shape)))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the band."""
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _node(data, (a,), lambda g: (g * inside,))


# -- reductions and shape ops --------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _node(data, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)
    return _node(data, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _wrap(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(data, (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tensors, vjp)


def _basic_index(a: Tensor, index) -> Tensor:
    """Slice/int indexing only; use gather/take_at for fancy indexing."""
    data = a.data[index]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[index] += g
        return (out,)

    return _node(data, (a,), vjp)


def gather(a, idx, axis: int = 0) -> Tensor:
    """Select sub-arrays along ``axis`` by integer index, with repeats."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = np.take(a.data, idx, axis=axis)

    def vjp(g):
        out = np.zeros_like(a.data)
        sl: list = [slice(None)] * a.data.ndim
        sl[axis] = idx
        np.add.at(out, tuple(sl), g)
        return (out,)

    return _node(data, (a,), vjp)


def scatter_add(src, idx, length: int) -> Tensor:
    """Sum rows of ``src`` into a [length, ...] tensor at positions ``idx``.

    The dual of gather along axis 0; repeated indices accumulate in
    occurrence order, which keeps summation deterministic.
    """
    src = _wrap(src)
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((length,) + src.data.shape[1:], dtype=np.float64)
    np.add.at(data, idx, src.data)

    def vjp(g):
        return (np.take(g, idx, axis=0),)

    return _node(data, (src,), vjp)


def take_at(a, rows, cols) -> Tensor:
    """Pick ``a[rows[i], cols[i]]`` for each i from a 2-D tensor."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    data = a.data[rows, cols]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _node(data, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (a,), vjp)

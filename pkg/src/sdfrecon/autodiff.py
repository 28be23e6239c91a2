"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough tensor ops for this codebase: elementwise math, matmul,
reductions, indexing/concat/reshape, an exclusive cumulative sum for
transmittance, and the fused hash-table gather used by the feature grid.
Gradient correctness is pinned by finite-difference tests, not by
construction; every backward rule is hand-written numpy.

Spatial derivatives of network outputs are *not* obtained by nesting
autodiff: forward tangents are propagated explicitly as ordinary graph
ops by the field code, so a single reverse pass differentiates losses
that contain spatial gradients.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from . import kernels

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # keep numpy from absorbing us in mixed expressions; defer to __r*__
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents = ()
        self._backward = None

    # -- graph plumbing -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray, fresh: bool = False) -> None:
        """Add ``g`` to the gradient. ``fresh`` promises g is newly allocated
        (or exclusively aliased), letting the first consumer bind without copy."""
        if self.grad is None:
            self.grad = g if fresh else np.array(g)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse accumulation from this tensor (scalar unless ``seed`` given)."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # interior grads are spent; leaves keep theirs

    # -- operators ----------------------------------------------------------

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

    def __pow__(self, k):
        return powi(self, k)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _data(x):
    # python scalars pass through untouched so they stay weakly typed and
    # do not upcast float32 graphs
    return x.data if isinstance(x, Tensor) else x


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    da, db = _data(a), _data(b)
    out_data = da + db

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            ga = _unbroadcast(g, da.shape)
            a._accumulate(ga, fresh=ga is not g)
        if isinstance(b, Tensor) and b.requires_grad:
            gb = _unbroadcast(g, db.shape)
            b._accumulate(gb, fresh=gb is not g)

    return _result(out_data, (a, b), backward)


def sub(a, b):
    da, db = _data(a), _data(b)
    out_data = da - db

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            ga = _unbroadcast(g, da.shape)
            a._accumulate(ga, fresh=ga is not g)
        if isinstance(b, Tensor) and b.requires_grad:
            b._accumulate(_unbroadcast(-g, db.shape), fresh=True)

    return _result(out_data, (a, b), backward)


def mul(a, b):
    da, db = _data(a), _data(b)
    out_data = da * db

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a._accumulate(_unbroadcast(g * db, da.shape), fresh=True)
        if isinstance(b, Tensor) and b.requires_grad:
            b._accumulate(_unbroadcast(g * da, db.shape), fresh=True)

    return _result(out_data, (a, b), backward)


def div(a, b):
    da, db = _data(a), _data(b)
    out_data = da / db

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a._accumulate(_unbroadcast(g / db, da.shape), fresh=True)
        if isinstance(b, Tensor) and b.requires_grad:
            b._accumulate(_unbroadcast(-g * da / (db * db), db.shape), fresh=True)

    return _result(out_data, (a, b), backward)


def powi(a, k):
    da = _data(a)
    out_data = da**k

    def backward(g):
        a._accumulate(_unbroadcast(g * k * da ** (k - 1), da.shape), fresh=True)

    return _result(out_data, (a,), backward)


# -- elementwise functions ----------------------------------------------------


def exp(a):
    y = np.exp(_data(a))

    def backward(g):
        a._accumulate(g * y, fresh=True)

    return _result(y, (a,), backward)


def expm1(a):
    y = np.expm1(_data(a))

    def backward(g):
        a._accumulate(g * (y + 1.0), fresh=True)

    return _result(y, (a,), backward)


def log(a):
    da = _data(a)

    def backward(g):
        a._accumulate(g / da, fresh=True)

    return _result(np.log(da), (a,), backward)


def sqrt(a):
    y = np.sqrt(_data(a))

    def backward(g):
        a._accumulate(g * 0.5 / y, fresh=True)

    return _result(y, (a,), backward)


def absolute(a):
    da = _data(a)

    def backward(g):
        a._accumulate(g * np.sign(da), fresh=True)

    return _result(np.abs(da), (a,), backward)


def relu(a):
    da = _data(a)

    def backward(g):
        a._accumulate(g * (da > 0), fresh=True)

    return _result(np.maximum(da, 0.0), (a,), backward)


def sigmoid(a):
    y = expit(_data(a))

    def backward(g):
        a._accumulate(g * y * (1.0 - y), fresh=True)

    return _result(y, (a,), backward)


def softplus(a, sharpness: float = 1.0):
    # stable split form: max(sx,0)/s + log1p(exp(-|sx|))/s; the cached
    # exp(-|sx|) also yields the sigmoid for the backward pass
    da = _data(a)
    sx = sharpness * da
    t = np.exp(-np.abs(sx))
    y = (np.maximum(sx, 0.0) + np.log1p(t)) / sharpness

    def backward(g):
        sig = np.where(sx >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
        a._accumulate(g * sig, fresh=True)

    return _result(y, (a,), backward)


def softplus_and_gate(a, sharpness: float = 1.0):
    """(softplus_s(x), sigmoid(s*x)) sharing one exp; the gate is what the
    forward-tangent propagation multiplies by."""
    da = _data(a)
    sx = sharpness * da
    t = np.exp(-np.abs(sx))
    y = (np.maximum(sx, 0.0) + np.log1p(t)) / sharpness
    sig = np.where(sx >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def backward_y(g):
        a._accumulate(g * sig, fresh=True)

    def backward_gate(g):
        a._accumulate(g * (sharpness * sig * (1.0 - sig)), fresh=True)

    return _result(y, (a,), backward_y), _result(sig, (a,), backward_gate)


def clip_max(a, cap: float):
    """min(a, cap); gradient passes only where a < cap."""
    da = _data(a)

    def backward(g):
        a._accumulate(g * (da < cap), fresh=True)

    return _result(np.minimum(da, cap), (a,), backward)


# -- reductions ----------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    da = _data(a)
    out_data = da.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, da.shape).copy(), fresh=True)

    return _result(out_data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    da = _data(a)
    n = da.size if axis is None else da.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def amin(a, axis: int, keepdims=False):
    """Minimum along one axis; ties route the gradient to the first argmin."""
    da = _data(a)
    arg = np.argmin(da, axis=axis)
    out_data = np.take_along_axis(da, np.expand_dims(arg, axis), axis=axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        buf = np.zeros_like(da)
        np.put_along_axis(buf, np.expand_dims(arg, axis), gg, axis=axis)
        a._accumulate(buf, fresh=True)

    return _result(out_data, (a,), backward)


# -- shape / indexing -----------------------------------------------------------


def reshape(a, shape):
    da = _data(a)

    def backward(g):
        a._accumulate(g.reshape(da.shape), fresh=True)

    return _result(da.reshape(shape), (a,), backward)


def transpose(a, axes):
    da = _data(a)
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inv), fresh=True)

    return _result(da.transpose(axes), (a,), backward)


def take(a, key, unique: bool | None = None):
    """Static indexing (slices, ints, integer arrays); repeats accumulate.

    ``unique=True`` promises the key addresses each element at most once,
    enabling the fast scatter (basic indexing is detected automatically).
    """
    da = _data(a)
    if unique is None:
        parts = key if isinstance(key, tuple) else (key,)
        unique = not any(isinstance(p, np.ndarray) for p in parts)

    def backward(g):
        buf = np.zeros_like(da)
        if unique:
            buf[key] += g
        else:
            np.add.at(buf, key, g)
        a._accumulate(buf, fresh=True)

    return _result(da[key], (a,), backward)


def concat(parts, axis: int = -1):
    datas = [_data(p) for p in parts]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            if isinstance(p, Tensor) and p.requires_grad:
                p._accumulate(piece, fresh=True)

    return _result(np.concatenate(datas, axis=axis), tuple(parts), backward)


def matmul(a, b):
    da, db = _data(a), _data(b)

    def backward(g):
        if isinstance(a, Tensor) and a.requires_grad:
            a._accumulate(g @ db.T, fresh=True)
        if isinstance(b, Tensor) and b.requires_grad:
            b._accumulate(da.T @ g, fresh=True)

    return _result(da @ db, (a, b), backward)


def exclusive_cumsum(a, axis: int = -1):
    """y_i = sum_{j<i} x_j along ``axis`` (first entry 0)."""
    da = _data(a)
    inc = np.cumsum(da, axis=axis)
    out_data = np.concatenate(
        [np.zeros_like(np.take(inc, [0], axis=axis)), np.delete(inc, -1, axis=axis)],
        axis=axis,
    )

    def backward(g):
        suffix = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        a._accumulate(suffix - g, fresh=True)

    return _result(out_data, (a,), backward)


def gather_blend(table, idx: np.ndarray, w: np.ndarray):
    """out[n,j,f] = sum_c w[n,c,j] * table[idx[n,c], f], via the kernel backend."""
    dt = _data(table)
    out_data = kernels.gather_blend_fwd(dt, idx, w.astype(dt.dtype, copy=False))

    def backward(g):
        table._accumulate(
            kernels.gather_blend_bwd(
                dt.shape[0], idx, w.astype(g.dtype, copy=False), np.ascontiguousarray(g)
            ),
            fresh=True,
        )

    return _result(out_data, (table,), backward)

"""Differentiable primitives.

Binary elementwise ops broadcast only by leading-dimension expansion: one
operand's shape must equal the trailing dims of the other's (a 0-d operand
or a Python scalar matches anything). Anything else is a ``ShapeError``;
use :func:`broadcast_to` when an explicit expansion is wanted.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import DomainError, ShapeError, Tensor, as_tensor, record

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _check_leading(a_shape, b_shape, opname):
    if a_shape == b_shape:
        return
    short, long = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(short) == 0 or long[len(long) - len(short):] == short:
        return
    raise ShapeError(
        f"{opname}: shapes {a_shape} and {b_shape} are not compatible "
        "(only leading-dimension expansion is supported)"
    )


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum out leading dims that were expanded by broadcasting."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.reshape((-1,) + g.shape[lead:]).sum(axis=0)
    if g.shape != shape:
        # size-1 dims (0-d operand or explicit broadcast_to)
        axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _scalarish(x):
    return isinstance(x, (int, float, np.floating, np.integer))


def _pyfloat(x):
    # numpy scalars would upcast float32 arrays
    return float(x) if isinstance(x, (np.floating, np.integer, int)) else x


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = _pyfloat(a), _pyfloat(b)
    if _scalarish(b):
        return record(a.data + b, (a,), lambda g: (g,))
    if _scalarish(a):
        return record(b.data + a, (b,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    _check_leading(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b):
    a, b = _pyfloat(a), _pyfloat(b)
    if _scalarish(b):
        return record(a.data - b, (a,), lambda g: (g,))
    if _scalarish(a):
        return record(a - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    _check_leading(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b):
    a, b = _pyfloat(a), _pyfloat(b)
    if _scalarish(b):
        return record(a.data * b, (a,), lambda g: (g * b,))
    if _scalarish(a):
        return record(b.data * a, (b,), lambda g: (g * a,))
    a, b = as_tensor(a), as_tensor(b)
    _check_leading(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _reduce_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(ad * bd, (a, b), bw)


def div(a, b):
    a, b = _pyfloat(a), _pyfloat(b)
    if _scalarish(b):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    _check_leading(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _reduce_to(g / bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bw)


def neg(a):
    return record(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    With a 2-d right operand the left operand's leading dims are folded into
    GEMM rows, except that a 4-d+ left operand keeps its first (stream) axis
    as separate GEMMs so each stream's result does not depend on how many
    streams ride along.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    _check_leading(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        k, n = bd.shape
        groups = ad.shape[0] if ad.ndim >= 4 else 1
        out_shape = ad.shape[:-1] + (n,)
        a3 = ad.reshape(groups, -1, k)
        out = (a3 @ bd).reshape(out_shape)

        def bw_folded(g):
            g3 = g.reshape(groups, -1, n)
            ga = (g3 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a3.reshape(-1, k).T @ g3.reshape(-1, n) if b.requires_grad else None
            return ga, gb

        return record(out, (a, b), bw_folded)

    def bw(g):
        ga = _reduce_to(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _reduce_to(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(ad @ bd, (a, b), bw)


# ------------------------------------------------------------- unary maps


def exp(a):
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data < 0):
        raise DomainError("log of a negative input")
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative input")
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    ad = a.data
    return record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a):
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a):
    """tanh-approximated GELU."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return record(out, (a,), bw)


# ------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return record(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return record(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), bw)


def softmax(a):
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record(out, (a,), bw)


def logsumexp(a):
    """Stable log-sum-exp over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    s = np.exp(x - m).sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]

    def bw(g):
        return (g[..., None] * np.exp(x - out[..., None]),)

    return record(out, (a,), bw)


def layernorm(a, eps: float = 1e-5):
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return record(xhat, (a,), bw)


# --------------------------------------------------------------- shaping


def reshape(a, shape):
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a):
    return record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(a, idx):
    shape, dtype = a.shape, a.data.dtype
    advanced = _is_advanced(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return record(a.data[idx], (a,), bw)


def _is_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take_rows(table, ids):
    """Embedding lookup: rows of a 2-d table selected by an integer array."""
    ids = np.asarray(ids)
    shape, dtype = table.shape, table.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return record(table.data[ids], (table,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return record(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def broadcast_to(a, shape):
    """Explicit expansion (size-1 or missing leading dims)."""
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot expand {src} to {tuple(shape)}") from exc
    return record(out, (a,), lambda g: (_reduce_to(g, src),))


# ------------------------------------------------------------- composites


def stop_gradient(a) -> Tensor:
    """Same values, no gradient path back into ``a``."""
    a = as_tensor(a)
    return Tensor._wrap(a.data, requires_grad=False)


def cosine_similarity(a, b, eps: float = 1e-8):
    """Row-wise cosine over the last axis, guarded against zero rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    dot = (ad * bd).sum(axis=-1)
    den = na * nb + eps
    out = dot / den

    def bw(g):
        g = g[..., None]
        ga = gb = None
        if a.requires_grad:
            safe = np.where(na > 0, na, 1.0)[..., None]
            dden = (nb[..., None] * ad / safe) * (na > 0)[..., None]
            ga = g * (bd / den[..., None] - dot[..., None] * dden / (den * den)[..., None])
        if b.requires_grad:
            safe = np.where(nb > 0, nb, 1.0)[..., None]
            dden = (na[..., None] * bd / safe) * (nb > 0)[..., None]
            gb = g * (ad / den[..., None] - dot[..., None] * dden / (den * den)[..., None])
        return ga, gb

    return record(out, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight (+ bias)`` with weight stored as (d_in, d_out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def mse(pred, target):
    d = sub(pred, target)
    return mean(square(d))


# names used when enumerating ops for gradient checks
ELEMENTWISE = (
    "add", "sub", "mul", "relu", "gelu", "softmax_lastdim", "layernorm_lastdim",
    "exp", "log", "square", "sqrt", "mean", "sum",
)

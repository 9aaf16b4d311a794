"""Random gradcheck instances for every registered op.

Each entry builds ``(f, x)`` from a generator: ``f`` maps a Tensor to a
scalar and exercises one op (plus a fixed random readout so every output
coordinate gets a distinct weight).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .gradcheck import gradcheck
from .tensor import Tensor


def _shape(rng, lo=1, hi=4, ndim=None):
    ndim = ndim or int(rng.integers(1, 4))
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=ndim))


def _readout(rng, shape):
    w = rng.standard_normal(shape)
    return lambda y: ops.sum(ops.mul(y, Tensor(w)))


def _unary(op, domain=None):
    def build(rng):
        shape = _shape(rng)
        x = rng.standard_normal(shape)
        if domain == "pos":
            x = np.abs(x) + 0.5
        elif domain == "away0":
            x = np.sign(x) * (np.abs(x) + 0.1)  # relu kink
        r = _readout(rng, shape)
        return (lambda t: r(op(t))), x
    return build


def _binary(op, positive_b=False):
    def build(rng):
        shape = _shape(rng, ndim=int(rng.integers(2, 4)))
        b_shape = shape[int(rng.integers(0, len(shape))):]  # leading-dim broadcast
        b = rng.standard_normal(b_shape)
        if positive_b:
            b = np.abs(b) + 0.5
        r = _readout(rng, shape)
        if rng.random() < 0.5:
            return (lambda t: r(op(t, Tensor(b)))), rng.standard_normal(shape)
        a = rng.standard_normal(shape)
        return (lambda t: r(op(Tensor(a), t))), b  # w.r.t. the broadcast operand
    return build


def _matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    lead = _shape(rng, ndim=int(rng.integers(0, 3))) if rng.random() < 0.7 else ()
    b_lead = lead if rng.random() < 0.5 else ()
    a = rng.standard_normal(lead + (m, k))
    b = rng.standard_normal(b_lead + (k, n))
    r = _readout(rng, lead + (m, n))
    if rng.random() < 0.5:
        return (lambda t: r(ops.matmul(t, Tensor(b)))), a
    return (lambda t: r(ops.matmul(Tensor(a), t))), b


def _reduce(op):
    def build(rng):
        shape = _shape(rng, ndim=int(rng.integers(1, 4)))
        axis = None if rng.random() < 0.3 else int(rng.integers(0, len(shape)))
        keep = bool(rng.random() < 0.5)
        x = rng.standard_normal(shape)
        y = op(Tensor(x), axis=axis, keepdims=keep)
        r = _readout(rng, y.shape)
        return (lambda t: r(op(t, axis=axis, keepdims=keep))), x
    return build


def _last_axis(op):
    def build(rng):
        shape = _shape(rng, lo=2, hi=5)
        x = rng.standard_normal(shape)
        r = _readout(rng, op(Tensor(x)).shape)
        return (lambda t: r(op(t))), x
    return build


def _reshape(rng):
    shape = _shape(rng, ndim=3)
    new = (shape[0] * shape[1], shape[2])
    r = _readout(rng, new)
    return (lambda t: r(ops.reshape(t, new))), rng.standard_normal(shape)


def _transpose(rng):
    shape = _shape(rng, ndim=3)
    axes = tuple(int(a) for a in rng.permutation(3))
    r = _readout(rng, tuple(shape[a] for a in axes))
    return (lambda t: r(ops.transpose(t, axes))), rng.standard_normal(shape)


def _swap_last(rng):
    shape = _shape(rng, ndim=int(rng.integers(2, 4)))
    r = _readout(rng, shape[:-2] + (shape[-1], shape[-2]))
    return (lambda t: r(ops.swap_last(t))), rng.standard_normal(shape)


def _getitem(rng):
    shape = _shape(rng, lo=2, hi=5, ndim=2)
    if rng.random() < 0.5:
        idx = (slice(1, None), slice(None, 1))
    else:
        idx = rng.integers(0, shape[0], size=4)  # repeated rows accumulate
    x = rng.standard_normal(shape)
    r = _readout(rng, x[idx].shape)
    return (lambda t: r(t[idx])), x


def _take_rows(rng):
    table = rng.standard_normal((5, 3))
    ids = rng.integers(0, 5, size=(2, 3))
    r = _readout(rng, (2, 3, 3))
    return (lambda t: r(ops.take_rows(t, ids))), table


def _concat(rng):
    shape = _shape(rng, ndim=2)
    other = rng.standard_normal(shape)
    axis = int(rng.integers(0, 2))
    out_shape = list(shape)
    out_shape[axis] *= 2
    r = _readout(rng, tuple(out_shape))
    return (lambda t: r(ops.concat([t, Tensor(other)], axis=axis))), rng.standard_normal(shape)


def _stack(rng):
    shape = _shape(rng, ndim=2)
    other = rng.standard_normal(shape)
    r = _readout(rng, (2,) + shape)
    return (lambda t: r(ops.stack([Tensor(other), t]))), rng.standard_normal(shape)


def _broadcast(rng):
    shape = _shape(rng, ndim=2)
    lead = (int(rng.integers(1, 4)),)
    r = _readout(rng, lead + shape)
    return (lambda t: r(ops.broadcast_to(t, lead + shape))), rng.standard_normal(shape)


def _cosine(rng):
    shape = _shape(rng, lo=2, hi=4, ndim=2)
    other = rng.standard_normal(shape)
    r = _readout(rng, shape[:-1])
    return (lambda t: r(ops.cosine_similarity(t, Tensor(other)))), rng.standard_normal(shape)


def _linear(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    bias = rng.standard_normal(2)
    r = _readout(rng, (3, 2))
    choice = int(rng.integers(0, 3))
    if choice == 0:
        return (lambda t: r(ops.linear(t, Tensor(w), Tensor(bias)))), x
    if choice == 1:
        return (lambda t: r(ops.linear(Tensor(x), t, Tensor(bias)))), w
    return (lambda t: r(ops.linear(Tensor(x), Tensor(w), t))), bias


def _mse(rng):
    shape = _shape(rng)
    target = rng.standard_normal(shape)
    return (lambda t: ops.mse(t, Tensor(target))), rng.standard_normal(shape)


OP_CASES: dict[str, Callable] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, positive_b=True),
    "neg": _unary(ops.neg),
    "matmul": _matmul,
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, "pos"),
    "sqrt": _unary(ops.sqrt, "pos"),
    "square": _unary(ops.square),
    "relu": _unary(ops.relu, "away0"),
    "tanh": _unary(ops.tanh),
    "gelu": _unary(ops.gelu),
    "sum": _reduce(ops.sum),
    "mean": _reduce(ops.mean),
    "softmax": _last_axis(ops.softmax),
    "logsumexp": _last_axis(ops.logsumexp),
    "layernorm": _last_axis(ops.layernorm),
    "reshape": _reshape,
    "transpose": _transpose,
    "swap_last": _swap_last,
    "getitem": _getitem,
    "take_rows": _take_rows,
    "concat": _concat,
    "stack": _stack,
    "broadcast_to": _broadcast,
    "cosine_similarity": _cosine,
    "linear": _linear,
    "mse": _mse,
}


def check_ops(seed: int = 0, instances: int = 10, names=None) -> dict[str, float]:
    """Max relative gradcheck error per op over ``instances`` random cases."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in names or OP_CASES:
        worst = 0.0
        for _ in range(instances):
            f, x = OP_CASES[name](rng)
            worst = max(worst, gradcheck(f, Tensor(np.asarray(x, dtype=np.float64)), eps=1e-6))
        out[name] = worst
    return out

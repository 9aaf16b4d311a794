"""Central finite-difference gradient checking on a 64-bit shadow path."""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericError, Tensor, default_dtype, no_grad


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def _scalar(out: Tensor) -> float:
    val = float(np.asarray(out.data).reshape(-1)[0]) if out.data.size == 1 else None
    if val is None:
        raise NumericError(f"gradcheck needs a scalar function, got shape {out.shape}")
    if not np.isfinite(val):
        raise NumericError("function returned a non-finite value")
    return val


@contextlib.contextmanager
def shadow64(tensors: Sequence[Tensor]):
    """Evaluate with the given tensors (and new inputs) held in float64.

    The original arrays are put back on exit, so stored values are untouched.
    """
    saved = [(t, t.data, t.grad) for t in tensors]
    for t in tensors:
        t.data = t.data.astype(np.float64)
        t.grad = None
    try:
        with default_dtype(np.float64):
            yield
    finally:
        for t, data, grad in saved:
            t.data = data
            t.grad = grad


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.asarray(x.data, dtype=np.float64)
    with default_dtype(np.float64):
        xt = Tensor(base.copy(), requires_grad=True)
        out = f(xt)
        _scalar(out)
        out.backward()
        analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        with no_grad():
            for i in range(base.size):
                xp = base.copy().reshape(-1)
                xp[i] += eps
                fp = _scalar(f(Tensor(xp.reshape(base.shape))))
                xp[i] -= 2 * eps
                fm = _scalar(f(Tensor(xp.reshape(base.shape))))
                flat[i] = (fp - fm) / (2 * eps)
    return float(_rel_err(analytic, numeric).max()) if base.size else 0.0


def gradcheck_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    coords: Sequence[tuple[int, int]],
    eps: float = 1e-3,
    shadow: Sequence[Tensor] = (),
) -> dict:
    """Check selected scalar coordinates of several parameters.

    ``coords`` lists ``(param_index, flat_index)`` pairs. ``shadow`` names any
    further tensors that ``loss_fn`` reads and that should run in float64.
    Returns per-coordinate analytic/numeric values and the max relative error.
    """
    everything = list({id(t): t for t in list(params) + list(shadow)}.values())
    with shadow64(everything):
        for p in params:
            p.grad = None
        out = loss_fn()
        _scalar(out)
        out.backward()
        analytic = np.array(
            [0.0 if params[pi].grad is None else params[pi].grad.reshape(-1)[fi] for pi, fi in coords]
        )
        numeric = np.zeros(len(coords))
        with no_grad():
            for n, (pi, fi) in enumerate(coords):
                flat = params[pi].data.reshape(-1)
                orig = flat[fi]
                flat[fi] = orig + eps
                fp = _scalar(loss_fn())
                flat[fi] = orig - eps
                fm = _scalar(loss_fn())
                flat[fi] = orig
                numeric[n] = (fp - fm) / (2 * eps)
        for p in params:
            p.grad = None
    err = _rel_err(analytic, numeric)
    return {"analytic": analytic, "numeric": numeric, "max_rel_error": float(err.max()) if err.size else 0.0}

"""Cosine noise schedule, forward noising, the x0 action loss and few-step sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, ops


class ScheduleError(ValueError):
    pass


def cosine_alpha_bar(K: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    """ᾱ_1..ᾱ_K from the cosine schedule (betas clipped so ᾱ_K stays positive)."""

    def f(t):
        return math.cos((t / K + s) / (1 + s) * math.pi / 2) ** 2

    betas = np.array([min(1 - f(k) / f(k - 1), max_beta) for k in range(1, K + 1)])
    return np.cumprod(1.0 - betas)


@dataclass
class DiffusionSchedule:
    K: int = 50
    sampler_steps: int = 5
    alpha_bar: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.alpha_bar is None:
            self.alpha_bar = cosine_alpha_bar(self.K)
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if len(self.alpha_bar) != self.K:
            raise ScheduleError("alpha_bar must have K entries")
        if self.sampler_steps > self.K or self.sampler_steps < 1:
            raise ScheduleError(f"sampler_steps must be in [1, K={self.K}]")

    def ab(self, k) -> np.ndarray:
        """ᾱ_k for 1-based timesteps."""
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.K):
            raise IndexError(f"timestep out of range 1..{self.K}: {k}")
        return self.alpha_bar[k - 1]

    def sub_schedule(self, steps: int) -> list[int]:
        """Evenly spaced timesteps from K down to 1."""
        if steps < 1:
            raise ScheduleError("steps must be >= 1")
        if steps > self.K:
            raise ScheduleError(f"steps={steps} exceeds K={self.K}")
        return [int(round(x)) for x in np.linspace(self.K, 1, steps)] if steps > 1 else [self.K]


def noise_actions_ab(a: np.ndarray, alpha_bar, eps: np.ndarray) -> np.ndarray:
    """ã = √ᾱ·a + √(1−ᾱ)·ε with ᾱ given directly (scalar or per-sample)."""
    a = np.asarray(a)
    eps = np.asarray(eps)
    if a.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match actions {a.shape}")
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (a.ndim - 1))
    out = np.sqrt(ab) * a + np.sqrt(1.0 - ab) * eps
    return out.astype(a.dtype if a.dtype.kind == "f" else np.float32)


def noise_actions(schedule: DiffusionSchedule, a: np.ndarray, k, eps: np.ndarray) -> np.ndarray:
    return noise_actions_ab(a, schedule.ab(k), eps)


def action_loss(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over chunk entries.

    With a per-sample ``mask`` the mean runs over labeled samples only, and
    unlabeled samples contribute exactly zero value and gradient.
    """
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"action_loss: {pred.shape} vs {target.shape}")
    if mask is None:
        return ops.mse(pred, target)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0)
    per_entry = ops.square(pred - target)
    w = np.broadcast_to(mask.reshape((-1,) + (1,) * (pred.ndim - 1)), pred.shape).astype(pred.data.dtype)
    per_elem = int(np.prod(pred.shape[1:]))
    return ops.sum(per_entry * Tensor._wrap(np.ascontiguousarray(w))) * (1.0 / (n * per_elem))


def ddim_update(x_k: np.ndarray, x0: np.ndarray, ab_k: float, ab_next: float | None) -> np.ndarray:
    """Deterministic re-noising of a clean estimate to the next (smaller) timestep."""
    if ab_next is None:
        return x0
    eps_hat = (x_k - math.sqrt(ab_k) * x0) / math.sqrt(max(1.0 - ab_k, 1e-12))
    return math.sqrt(ab_next) * x0 + math.sqrt(1.0 - ab_next) * eps_hat


def sample_loop(predict_x0, schedule: DiffusionSchedule, shape, steps: int, seed: int) -> np.ndarray:
    """Few-step sampler: start from unit noise, predict x̂0, re-noise, repeat; clip the end.

    ``predict_x0(x_k, k)`` maps a noisy chunk batch and an int timestep to x̂0.
    """
    ks = schedule.sub_schedule(steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    for i, k in enumerate(ks):
        x0 = np.asarray(predict_x0(x, k), dtype=np.float32)
        nxt = schedule.ab(ks[i + 1]) if i + 1 < len(ks) else None
        x = ddim_update(x, x0, float(schedule.ab(k)), None if nxt is None else float(nxt)).astype(np.float32)
    return np.clip(x, -1.0, 1.0)

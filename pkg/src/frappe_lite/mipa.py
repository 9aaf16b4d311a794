"""Mixture of prefix-and-LoRA experts over one shared, frozen backbone.

Each expert owns a prefix bank, a LoRA bundle covering every backbone
projection, and a projection head into its teacher's embedding space. A
small router mixes the experts' action latents before the shared action head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import NumericError, ShapeError, Tensor, ops
from .nn import Linear, Module, init_normal, param


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------- LoRA


def lora_delta(x: Tensor, A: Tensor, U: Tensor, alpha: float) -> Tensor:
    """(α/r)·U·A applied to row vectors: x @ Aᵀ @ Uᵀ · α/r."""
    r = A.shape[0]
    return ((x @ A.T) @ U.T) * (alpha / r)


def lora_forward(base_weight: Tensor, A: Tensor, U: Tensor, x: Tensor, alpha: float = 8.0,
                 bias: Tensor | None = None) -> Tensor:
    """Adapter path ``base(x) + (α/r)·U(A x)``; ``base_weight`` is (d_in, d_out)."""
    d_in, d_out = base_weight.shape
    r = A.shape[0]
    if r >= min(d_in, d_out):
        raise ConfigError(f"LoRA rank {r} must be below min(d_in, d_out) = {min(d_in, d_out)}")
    if A.shape != (r, d_in) or U.shape != (d_out, r):
        raise ShapeError(f"LoRA shapes A{A.shape} U{U.shape} do not fit weight {base_weight.shape}")
    return ops.linear(x, base_weight, bias) + lora_delta(x, A, U, alpha)


def merge_lora(base_weight: np.ndarray, A: np.ndarray, U: np.ndarray, alpha: float = 8.0) -> np.ndarray:
    """Fold the adapter into a (d_in, d_out) weight: W + ((α/r)·U·A)ᵀ."""
    r = A.shape[0]
    return base_weight + (alpha / r) * (U @ A).T


class LoRAStack:
    """Per-forward view of all experts' LoRA bundles, stacked on a stream axis.

    ``delta(key, x)`` takes x of shape (M, ..., d_in) and returns the
    per-stream low-rank update. Stacks are built once per key and reused by
    the main and prefix streams.
    """

    def __init__(self, experts: "ExpertSet"):
        self.experts = experts
        self.scale = experts.alpha / experts.rank
        self._cache = {}

    def delta(self, key: str, x: Tensor):
        if key not in self.experts.lora_keys:
            return None
        if key not in self._cache:
            A = ops.stack([e.lora[key][0] for e in self.experts.experts])  # (M, r, d_in)
            U = ops.stack([e.lora[key][1] for e in self.experts.experts])  # (M, d_out, r)
            self._cache[key] = (A.T, U.T)
        At, Ut = self._cache[key]
        M = x.shape[0]
        lead = x.shape[:-1]
        flat = x.reshape(M, -1, x.shape[-1])
        y = (flat @ At) @ Ut
        return y.reshape(*lead, Ut.shape[-1]) * self.scale


# ---------------------------------------------------------------- routing


class Router(Module):
    """Two-layer MLP over [mean-pooled vision tokens, proprio token] -> M logits."""

    def __init__(self, rng, d_in: int, hidden: int, num_experts: int):
        super().__init__()
        self.fc1 = Linear(rng, d_in, hidden)
        self.fc2 = Linear(rng, hidden, num_experts, zero=True)

    def __call__(self, summary: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(summary)))


def route(router: Router, cond_summary: Tensor) -> tuple[Tensor, Tensor]:
    """Returns (weights, logits); weights are the softmax of the logits."""
    g = router(cond_summary)
    return ops.softmax(g), g


def smooth_weights(w, eps: float):
    """w' = w·(1−ε) + ε/M, keeping every expert's weight at least ε/M."""
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"smoothing eps must lie in [0, 1), got {eps}")
    M = w.shape[-1]
    if isinstance(w, Tensor):
        return w * (1.0 - eps) + eps / M
    return np.asarray(w) * (1.0 - eps) + eps / M


def aggregate(z: list[Tensor] | Tensor, w: Tensor, action_head) -> Tensor:
    """MLP(Σ_i w'_i · z_i) with per-sample weights.

    ``z`` is either a list of M tensors (B, T, d) / (T, d) or one stacked
    (M, ...) tensor; ``w`` is (M,) or (B, M).
    """
    zs = ops.stack(z) if isinstance(z, (list, tuple)) else z
    M = zs.shape[0]
    if w.shape[-1] != M:
        raise ShapeError(f"{M} expert latents but {w.shape[-1]} weights")
    if w.ndim == 1:
        wm = w.reshape(M, *([1] * (zs.ndim - 1)))
    else:
        wm = w.T.reshape(M, w.shape[0], *([1] * (zs.ndim - 2)))
    mixed = ops.sum(zs * ops.broadcast_to(wm, zs.shape), axis=0)
    return action_head(mixed)


def load_balance_loss(g: Tensor) -> Tensor:
    """Mean over routed rows of the squared log-sum-exp of the router logits."""
    if not np.all(np.isfinite(g.data)):
        raise NumericError("non-finite router logits")
    if g.ndim == 1:
        g = g.reshape(1, -1)
    return ops.mean(ops.square(ops.logsumexp(g)))


# --------------------------------------------------------------- experts


class Expert(Module):
    def __init__(self, rng, n_prefix: int, d: int, d_teacher: int, lora_shapes: dict, rank: int,
                 prefix_init: np.ndarray | None = None):
        super().__init__()
        self.prefix = param(prefix_init.copy()) if prefix_init is not None else init_normal(rng, (n_prefix, d), 0.5)
        self.proj = init_normal(rng, (d, d_teacher), 1.0 / np.sqrt(d))
        lora = {}
        for key, (d_in, d_out) in lora_shapes.items():
            # A: r x d_in (small random), U: d_out x r (zero) -> no-op at init
            lora[key] = (init_normal(rng, (rank, d_in), 1.0 / np.sqrt(d_in)), param(np.zeros((d_out, rank))))
        object.__setattr__(self, "lora", lora)

    def named_parameters(self, prefix: str = ""):
        yield prefix + "prefix", self.prefix
        for key, (A, U) in self.lora.items():
            yield f"{prefix}lora.{key}.A", A
            yield f"{prefix}lora.{key}.U", U
        yield prefix + "proj", self.proj


def lora_targets(model) -> dict:
    """adapter_key -> (d_in, d_out) for every adapted backbone projection."""
    out = {}
    for blk in model.blocks:
        for lin in (blk.self_attn.q, blk.self_attn.k, blk.self_attn.v, blk.self_attn.o,
                    blk.cross_attn.q, blk.cross_attn.k, blk.cross_attn.v, blk.cross_attn.o,
                    blk.fc1, blk.fc2):
            out[lin.adapter_key] = (lin.d_in, lin.d_out)
    return out


@dataclass
class ExpertOutput:
    actions: Tensor  # (B, T_a, action_dim)
    weights: Tensor  # smoothed, (B, M)
    logits: Tensor  # (B, M)
    prefix: Tensor | None  # (M, B, n, d)
    latents: Tensor  # (M, B, T_a, d)


class ExpertSet(Module):
    """M experts (prefix bank, LoRA bundle, teacher projection) and one router."""

    def __init__(self, model, num_experts: int = 3, rank: int = 1, alpha: float = 8.0,
                 smoothing: float = 0.1, router_hidden: int = 32, seed: int = 0,
                 prefix_init: np.ndarray | None = None, use_lora: bool = True):
        super().__init__()
        cfg = model.cfg
        targets = lora_targets(model)
        smallest = min(min(s) for s in targets.values())
        if rank >= smallest:
            raise ConfigError(f"LoRA rank {rank} must be below {smallest}")
        if not 0.0 <= smoothing < 1.0:
            raise ConfigError("smoothing must lie in [0, 1)")
        rng = np.random.default_rng([seed, 7])
        object.__setattr__(self, "num_experts", num_experts)
        object.__setattr__(self, "rank", rank)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "smoothing", smoothing)
        object.__setattr__(self, "use_lora", use_lora)
        object.__setattr__(self, "lora_keys", set(targets) if use_lora else set())
        self.experts = [
            Expert(rng, cfg.n_prefix, cfg.d_model, cfg.d_teacher, targets if use_lora else {}, rank, prefix_init)
            for _ in range(num_experts)
        ]
        self.router = Router(rng, 2 * cfg.d_model, router_hidden, num_experts)

    def named_parameters(self, prefix: str = ""):
        for i, e in enumerate(self.experts):
            yield from e.named_parameters(f"{prefix}expert.{i}.")
        yield f"{prefix}router.0.weight", self.router.fc1.weight
        yield f"{prefix}router.0.bias", self.router.fc1.bias
        yield f"{prefix}router.1.weight", self.router.fc2.weight
        yield f"{prefix}router.1.bias", self.router.fc2.bias

    def prefix_banks(self) -> Tensor:
        return ops.stack([e.prefix for e in self.experts])

    def projections(self) -> Tensor:
        return ops.stack([e.proj for e in self.experts])

    def run(self, model, images, proprio, instruction, noisy, k, with_prefix: bool = True) -> ExpertOutput:
        M = self.num_experts
        adapters = LoRAStack(self) if self.use_lora else None
        out = model.forward(images, proprio, instruction, noisy, k, prefix_banks=self.prefix_banks(),
                            adapters=adapters, streams=M, with_prefix=with_prefix)
        summary = ops.concat([ops.mean(out.vision, axis=1), out.proprio_token], axis=-1)
        w, g = route(self.router, summary)
        ws = smooth_weights(w, self.smoothing)
        actions = aggregate(out.latents, ws, model.head)
        return ExpertOutput(actions, ws, g, out.prefix, out.latents)

    def predict(self, model, images, proprio, instruction, noisy, k) -> Tensor:
        return self.run(model, images, proprio, instruction, noisy, k, with_prefix=False).actions

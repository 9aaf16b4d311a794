"""DiT-lite denoising policy.

The backbone sequence is ``[timestep, frequency, proprio, T_a noisy-action
tokens]`` (the *main* stream) plus ``n`` future-prefix tokens. Main tokens
never attend to prefix tokens, so prefixes read the whole context without
changing the action path. Prefix outputs are taken after block
``align_layer``; blocks past that point skip the prefix stream entirely.

Hidden states carry a leading stream axis ``M`` so that expert replicas
(each with its own prefix bank and LoRA deltas) run as one batched forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, no_grad, ops
from .diffusion import DiffusionSchedule, sample_loop
from .nn import LayerNorm, Linear, Module, init_normal, param


KEYPOINT_SHARPNESS = 5.0


@dataclass
class ModelConfig:
    d_model: int = 64
    depth: int = 8
    heads: int = 4
    mlp_hidden: int = 128
    n_prefix: int = 4
    chunk: int = 8
    action_dim: int = 3
    proprio_dim: int = 5
    vocab: int = 8
    d_teacher: int = 32
    image_size: int = 32
    patch: int = 4
    keypoints: int = 8
    control_freq: float = 10.0
    diffusion_steps: int = 50
    sampler_steps: int = 5
    align_layer: int | None = None  # defaults to ceil(3 * depth / 4)

    def __post_init__(self):
        if self.align_layer is None:
            self.align_layer = math.ceil(3 * self.depth / 4)
        if not 1 <= self.align_layer <= self.depth:
            raise ValueError("align_layer must lie within the backbone")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    @property
    def main_len(self) -> int:
        return 3 + self.chunk


def sinusoidal(values: np.ndarray, dim: int, max_period: float = 1000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = np.asarray(values, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def grid_sincos(grid: int, dim: int) -> np.ndarray:
    """2-D sin-cos table for a ``grid`` x ``grid`` token layout, row-major, shape (grid², dim)."""
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    half = dim // 2
    return np.concatenate([sinusoidal(rows.ravel(), half, 100.0), sinusoidal(cols.ravel(), half, 100.0)], axis=1)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, H/p * W/p, C*p*p), row-major over the patch grid."""
    B, C, H, W = images.shape
    g = H // patch
    x = images.reshape(B, C, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(B, g * g, C * patch * patch))


class VisionEncoder(Module):
    """Two conv-style patch layers: 4x4 patches (8x8 grid), then 2x2 merging (4x4 grid).

    A spatial-softmax keypoint readout runs beside the patch path: a per-pixel
    MLP scores ``keypoints`` heat maps, a softmax over pixels turns each into an
    expected (x, y), and the embedded coordinates are added to every token.
    Patch features alone localize only to patch granularity.
    """

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.patch = cfg.patch
        self.grid = cfg.image_size // cfg.patch
        self.embed = Linear(rng, 3 * cfg.patch * cfg.patch, d)
        # learnable, but start from a fixed 2-D layout so tokens know where they are
        self.pos1 = param(grid_sincos(self.grid, d))
        self.merge = Linear(rng, 4 * d, d)
        self.pos2 = param(grid_sincos(self.grid // 2, d))
        self.kp1 = Linear(rng, 3, 16)
        self.kp2 = Linear(rng, 16, cfg.keypoints)
        self.kp_out = Linear(rng, 2 * cfg.keypoints, d)
        self.norm = LayerNorm(d)
        # pixel-centre coordinates in world units: x to the right, y up
        c = (np.arange(cfg.image_size) + 0.5) / cfg.image_size * 2.0 - 1.0
        ys, xs = np.meshgrid(-c, c, indexing="ij")
        object.__setattr__(self, "coords", np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float32))

    def __call__(self, images: np.ndarray) -> Tensor:
        B = images.shape[0]
        d = self.pos1.shape[1]
        x = Tensor._wrap(patchify(np.asarray(images, dtype=self.embed.weight.data.dtype) * 2.0 - 1.0, self.patch))
        x = ops.gelu(self.embed(x) + self.pos1)
        g = self.grid
        x = x.reshape(B, g // 2, 2, g // 2, 2, d).transpose(0, 1, 3, 2, 4, 5).reshape(B, (g // 2) ** 2, 4 * d)
        x = ops.gelu(self.merge(x)) + self.pos2
        kp = self.keypoints(images).reshape(B, -1)
        x = x + ops.broadcast_to(self.kp_out(kp).reshape(B, 1, d), x.shape)
        return self.norm(x)

    def keypoints(self, images: np.ndarray) -> Tensor:
        """(B, K, 2) expected (x, y) per heat map; softmax runs over all pixels."""
        B = images.shape[0]
        pix = np.asarray(images, dtype=self.embed.weight.data.dtype) * 2.0 - 1.0
        pix = Tensor._wrap(np.ascontiguousarray(pix.reshape(B, 3, -1).transpose(0, 2, 1)))
        heat = ops.softmax(self.kp2(ops.gelu(self.kp1(pix))).T * KEYPOINT_SHARPNESS)
        return heat @ Tensor._wrap(self.coords.astype(heat.data.dtype))


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, S, d = x.shape
    x = x.reshape(*lead, S, heads, d // heads)
    n = len(lead)
    axes = tuple(range(n)) + (n + 1, n, n + 2)
    return x.transpose(axes)


def merge_heads(x: Tensor) -> Tensor:
    *lead, H, S, dh = x.shape
    n = len(lead)
    axes = tuple(range(n)) + (n + 1, n, n + 2)
    return x.transpose(axes).reshape(*lead, S, H * dh)


def attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    w = ops.softmax((q @ k.T) * scale)
    return w @ v


class Attention(Module):
    def __init__(self, rng, d: int, heads: int, key: str):
        super().__init__()
        self.heads = heads
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)
        for name in ("q", "k", "v", "o"):
            object.__setattr__(getattr(self, name), "adapter_key", f"{key}.{name}")

    def project(self, x, adapters):
        h = self.heads
        return (split_heads(self.q(x, adapters), h), split_heads(self.k(x, adapters), h),
                split_heads(self.v(x, adapters), h))


class Block(Module):
    def __init__(self, rng, cfg: ModelConfig, index: int):
        super().__init__()
        d = cfg.d_model
        key = f"blocks.{index}"
        self.norm1 = LayerNorm(d)
        self.self_attn = Attention(rng, d, cfg.heads, f"{key}.self_attn")
        self.norm2 = LayerNorm(d)
        self.cross_attn = Attention(rng, d, cfg.heads, f"{key}.cross_attn")
        self.norm3 = LayerNorm(d)
        self.fc1 = Linear(rng, d, cfg.mlp_hidden)
        self.fc2 = Linear(rng, cfg.mlp_hidden, d)
        object.__setattr__(self.fc1, "adapter_key", f"{key}.mlp.fc1")
        object.__setattr__(self.fc2, "adapter_key", f"{key}.mlp.fc2")

    def __call__(self, x: Tensor, p: Tensor | None, ctx: Tensor, adapters=None):
        sa, ca = self.self_attn, self.cross_attn
        # self-attention: main attends main; prefix attends main + prefix
        qm, km, vm = sa.project(self.norm1(x), adapters)
        out_m = attend(qm, km, vm)
        if p is not None:
            qp, kp, vp = sa.project(self.norm1(p), adapters)
            out_p = attend(qp, ops.concat([km, kp], axis=-2), ops.concat([vm, vp], axis=-2))
        x = x + sa.o(merge_heads(out_m), adapters)
        if p is not None:
            p = p + sa.o(merge_heads(out_p), adapters)
        # cross-attention to vision + language tokens
        kc = split_heads(ca.k(ctx, adapters), ca.heads)
        vc = split_heads(ca.v(ctx, adapters), ca.heads)
        x = x + ca.o(merge_heads(attend(split_heads(ca.q(self.norm2(x), adapters), ca.heads), kc, vc)), adapters)
        if p is not None:
            p = p + ca.o(merge_heads(attend(split_heads(ca.q(self.norm2(p), adapters), ca.heads), kc, vc)), adapters)
        x = x + self.fc2(ops.gelu(self.fc1(self.norm3(x), adapters)), adapters)
        if p is not None:
            p = p + self.fc2(ops.gelu(self.fc1(self.norm3(p), adapters)), adapters)
        return x, p


class ActionHead(Module):
    """Shared MLP decoder d -> d -> action_dim, applied per action token."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.fc1 = Linear(rng, cfg.d_model, cfg.d_model)
        self.fc2 = Linear(rng, cfg.d_model, cfg.action_dim)
        self.fc2.weight.data *= 0.1

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(z)))


@dataclass
class ForwardOutput:
    latents: Tensor  # (M, B, T_a, d)
    prefix: Tensor | None  # (M, B, n, d) at the alignment layer
    vision: Tensor  # (B, n_v, d)
    proprio_token: Tensor  # (B, d)
    extras: dict = field(default_factory=dict)


class PolicyModel(Module):
    """Condition encoders + DiT-lite backbone + action head + single prefix bank."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, zero_prefix: bool = False):
        super().__init__()
        cfg = cfg or ModelConfig()
        object.__setattr__(self, "cfg", cfg)
        object.__setattr__(self, "schedule", DiffusionSchedule(cfg.diffusion_steps, cfg.sampler_steps))
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.vision = VisionEncoder(rng, cfg)
        self.language = init_normal(rng, (cfg.vocab, d), 0.5)
        self.time_mlp = Linear(rng, d, d)
        self.freq_mlp = Linear(rng, d, d)
        self.proprio_in = Linear(rng, cfg.proprio_dim, d)
        self.action_in = Linear(rng, cfg.action_dim, d)
        self.main_pos = init_normal(rng, (cfg.main_len, d), 0.02)
        self.blocks = [Block(rng, cfg, i) for i in range(cfg.depth)]
        self.final_norm = LayerNorm(d)
        self.head = ActionHead(rng, cfg)
        if cfg.n_prefix:
            self.prefix = param(np.zeros((cfg.n_prefix, d))) if zero_prefix else init_normal(rng, (cfg.n_prefix, d), 0.5)
        else:
            object.__setattr__(self, "prefix", None)
        self.align_proj = init_fan_in_nobias(rng, d, cfg.d_teacher)

    # ------------------------------------------------------------ encoders

    def encode_condition(self, images, proprio, instruction):
        vis = self.vision(images)
        lang = ops.take_rows(self.language, np.asarray(instruction)).reshape(len(instruction), 1, -1)
        ctx = ops.concat([vis, lang], axis=1)
        ptok = self.proprio_in(Tensor._wrap(np.asarray(proprio, dtype=self.main_pos.data.dtype)))
        return vis, ctx, ptok

    def main_tokens(self, ptok: Tensor, noisy: np.ndarray, k: np.ndarray) -> Tensor:
        cfg = self.cfg
        B = noisy.shape[0]
        dt = self.main_pos.data.dtype
        k = np.broadcast_to(np.asarray(k), (B,))
        t_tok = self.time_mlp(Tensor._wrap(sinusoidal(k, cfg.d_model).astype(dt)))
        f_tok = self.freq_mlp(Tensor._wrap(sinusoidal(np.full(B, cfg.control_freq), cfg.d_model).astype(dt)))
        a_tok = self.action_in(Tensor._wrap(np.asarray(noisy, dtype=dt)))
        d = cfg.d_model
        seq = ops.concat([t_tok.reshape(B, 1, d), f_tok.reshape(B, 1, d), ptok.reshape(B, 1, d), a_tok], axis=1)
        return seq + self.main_pos

    # ------------------------------------------------------------ backbone

    def forward(self, images, proprio, instruction, noisy, k, prefix_banks: Tensor | None = None,
                adapters=None, streams: int = 1, with_prefix: bool = True) -> ForwardOutput:
        """Run the backbone.

        ``prefix_banks`` (M, n, d) replaces the model's own bank when experts
        are active; ``streams`` is M. With ``with_prefix=False`` or an empty
        bank no prefix stream is computed.
        """
        cfg = self.cfg
        vis, ctx, ptok = self.encode_condition(images, proprio, instruction)
        x = self.main_tokens(ptok, np.asarray(noisy), k)
        B = x.shape[0]
        M = streams
        x = ops.broadcast_to(x, (M,) + x.shape)
        ctx_m = ops.broadcast_to(ctx, (M,) + ctx.shape)
        p = None
        if with_prefix:
            if prefix_banks is None and self.prefix is not None:
                prefix_banks = self.prefix.reshape(1, cfg.n_prefix, cfg.d_model)
            if prefix_banks is not None and prefix_banks.shape[-2] > 0:
                n = prefix_banks.shape[-2]
                p = ops.broadcast_to(prefix_banks.reshape(M, 1, n, cfg.d_model), (M, B, n, cfg.d_model))
        prefix_out = None
        for i, blk in enumerate(self.blocks):
            x, p = blk(x, p, ctx_m, adapters)
            if i + 1 == cfg.align_layer:
                prefix_out, p = p, None
        h = self.final_norm(x)
        latents = h[:, :, 3:3 + cfg.chunk, :]
        return ForwardOutput(latents, prefix_out, vis, ptok)

    def decode(self, latents: Tensor) -> Tensor:
        return self.head(latents)

    # ------------------------------------------------------------ sampling

    def predict_x0(self, images, proprio, instruction, noisy, k, experts=None) -> np.ndarray:
        with no_grad():
            if experts is None:
                out = self.forward(images, proprio, instruction, noisy, k, with_prefix=False)
                return self.decode(out.latents[0]).data
            return experts.predict(self, images, proprio, instruction, noisy, k).data

    def sample_actions(self, images, proprio, instruction, experts=None, steps: int | None = None,
                       seed: int = 0) -> np.ndarray:
        """Deterministic few-step sampling of a batch of action chunks."""
        steps = self.cfg.sampler_steps if steps is None else steps
        images = np.asarray(images)
        if images.ndim == 3:
            images, proprio, instruction = images[None], np.asarray(proprio)[None], np.atleast_1d(instruction)
        shape = (images.shape[0], self.cfg.chunk, self.cfg.action_dim)
        return sample_loop(
            lambda x, k: self.predict_x0(images, proprio, instruction, x, np.full(len(x), k), experts),
            self.schedule, shape, steps, seed,
        )

    def as_policy(self, experts=None, steps: int | None = None):
        """Chunk policy for :func:`frappe_lite.env.evaluate`."""

        def policy(inp):
            return self.sample_actions(inp.images, inp.proprio, inp.instruction, experts, steps, inp.seed)

        return policy


def init_fan_in_nobias(rng, d_in, d_out):
    return init_normal(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))

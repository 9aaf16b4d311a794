"""Frozen teacher encoders, the distilled single teacher, and alignment losses.

Teachers map a 3x32x32 image to 4 tokens (one per image quadrant) of
dimension 32. They stand in for pretrained vision models: three distinct
architectures with fixed seeds, never trained and never handed to an
optimizer.
"""

from __future__ import annotations

import logging

import numpy as np

from .autograd import Tensor, no_grad, ops, stop_gradient
from .nn import Linear, Module, init_normal
from .optim import Adam

log = logging.getLogger(__name__)

N_TOKENS = 4
D_TEACHER = 32
TEACHER_TAGS = ("patch-mlp", "conv-stack", "random-projection+tanh")
TEACHER_SEEDS = {"patch-mlp": 101, "conv-stack": 202, "random-projection+tanh": 303}


class ConfigError(ValueError):
    pass


def _check_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (3, 32, 32):
        raise ValueError(f"expected images of shape (3, 32, 32), got {images.shape[1:]}")
    return images


def quadrant_tokens(images: np.ndarray, pool: int) -> np.ndarray:
    """(B, C, 32, 32) -> (B, 4, C * (16/pool)^2): average-pooled quadrants, centred at 0."""
    B, C, H, W = images.shape
    x = images.reshape(B, C, H // pool, pool, W // pool, pool).mean(axis=(3, 5))
    g = H // pool // 2
    x = x.reshape(B, C, 2, g, 2, g).transpose(0, 2, 4, 1, 3, 5).reshape(B, 4, C * g * g)
    return (x - 0.5) * 2.0


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """'same' 3x3 convolution, (B, Cin, H, W) x (Cout, Cin, 3, 3)."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.stack([xp[:, :, i:i + H, j:j + W] for i in range(3) for j in range(3)], axis=2)  # B,C,9,H,W
    out = np.einsum("bckhw,ock->bohw", cols, w.reshape(w.shape[0], C, 9), optimize=True)
    return out + b[None, :, None, None]


class TeacherEncoder(Module):
    """Frozen image encoder producing (4, 32) embeddings."""

    def __init__(self, tag: str):
        super().__init__()
        if tag not in TEACHER_TAGS:
            raise ValueError(f"unknown teacher architecture {tag!r}")
        object.__setattr__(self, "tag", tag)
        rng = np.random.default_rng(TEACHER_SEEDS[tag])
        if tag == "patch-mlp":
            self.fc1 = Linear(rng, 192, 128)
            self.fc2 = Linear(rng, 128, D_TEACHER)
        elif tag == "conv-stack":
            self.conv1_w = init_normal(rng, (8, 3, 3, 3), 1.0 / np.sqrt(27))
            self.conv1_b = init_normal(rng, (8,), 0.1)
            self.conv2_w = init_normal(rng, (8, 8, 3, 3), 1.0 / np.sqrt(72))
            self.conv2_b = init_normal(rng, (8,), 0.1)
            self.fc1 = Linear(rng, 128, 96)
            self.fc2 = Linear(rng, 96, D_TEACHER)
        else:
            self.proj1 = init_normal(rng, (192, 96), 1.5 / np.sqrt(192))
            self.proj2 = init_normal(rng, (96, D_TEACHER), 1.5 / np.sqrt(96))
        self.requires_grad_(False)

    def _features(self, images: np.ndarray) -> np.ndarray:
        if self.tag == "patch-mlp":
            x = quadrant_tokens(images, 2)
            h = x @ self.fc1.weight.data + self.fc1.bias.data
            h = 0.5 * h * (1 + np.tanh(0.7978845608 * (h + 0.044715 * h ** 3)))
            return h @ self.fc2.weight.data + self.fc2.bias.data
        if self.tag == "conv-stack":
            x = (images - 0.5) * 2.0
            h = np.tanh(_conv3x3(x, self.conv1_w.data, self.conv1_b.data))
            B = h.shape[0]
            h = h.reshape(B, 8, 16, 2, 16, 2).mean(axis=(3, 5))
            h = np.maximum(_conv3x3(h, self.conv2_w.data, self.conv2_b.data), 0.0)
            h = quadrant_tokens(h / 2.0 + 0.5, 2)  # (B, 4, 8*4*4)
            h = np.tanh(h @ self.fc1.weight.data + self.fc1.bias.data)
            return h @ self.fc2.weight.data + self.fc2.bias.data
        x = quadrant_tokens(images, 2)
        return np.tanh(np.tanh(x @ self.proj1.data) @ self.proj2.data)

    def encode(self, images) -> Tensor:
        """Embeddings (B, 4, 32), or (4, 32) for a single image; never tracked."""
        single = np.asarray(images).ndim == 3
        feats = self._features(_check_images(images)).astype(np.float32)
        out = stop_gradient(Tensor(feats))
        return out[0] if single else out

    __call__ = encode


def make_teachers() -> list[TeacherEncoder]:
    return [TeacherEncoder(tag) for tag in TEACHER_TAGS]


# ------------------------------------------------------------------ losses


def align_loss_single(p: Tensor, proj: Tensor, e) -> Tensor:
    """1 − mean row cosine between proj(p) and the stop-gradient target e.

    ``p`` is (..., n, d), ``proj`` a (d, d_Φ) weight, ``e`` (..., n, d_Φ).
    """
    target = stop_gradient(e)
    z = p @ proj
    return 1.0 - ops.mean(ops.cosine_similarity(z, target))


def align_loss_multi(prefix_outputs, projs, embeddings) -> Tensor:
    """Sum over experts of the single-teacher alignment loss (expert i ↔ teacher i)."""
    if not (len(prefix_outputs) == len(projs) == len(embeddings)):
        raise ConfigError(
            f"{len(prefix_outputs)} prefix streams, {len(projs)} projections, {len(embeddings)} teachers"
        )
    total = None
    for p, w, e in zip(prefix_outputs, projs, embeddings):
        term = align_loss_single(p, w, e)
        total = term if total is None else total + term
    return total


def align_losses_stacked(prefix: Tensor, projs: Tensor, targets: np.ndarray) -> Tensor:
    """Per-expert losses (M,) from stacked prefix outputs (M, B, n, d),
    projections (M, d, d_Φ) and targets (M, B, n, d_Φ)."""
    M = prefix.shape[0]
    z = prefix.reshape(M, -1, prefix.shape[-1]) @ projs
    z = z.reshape(targets.shape)
    cos = ops.cosine_similarity(z, stop_gradient(Tensor._wrap(np.asarray(targets, dtype=z.data.dtype))))
    return 1.0 - ops.mean(cos.reshape(M, -1), axis=1)


# ---------------------------------------------------------- distillation


class StudentEncoder(Module):
    """Compact quadrant-token encoder: pooled patch -> hidden -> (4, 32)."""

    def __init__(self, rng, hidden: int = 32):
        super().__init__()
        self.fc1 = Linear(rng, 192, hidden)
        self.fc2 = Linear(rng, hidden, D_TEACHER)

    def __call__(self, images) -> Tensor:
        x = Tensor._wrap(quadrant_tokens(_check_images(images), 2).astype(self.fc1.weight.data.dtype))
        return self.fc2(ops.gelu(self.fc1(x)))


class DistilledTeacher(Module):
    """Student encoder plus per-teacher heads used only while distilling."""

    def __init__(self, seed: int = 0, num_teachers: int = 3, hidden: int = 32):
        super().__init__()
        rng = np.random.default_rng([seed, 11])
        self.student = StudentEncoder(rng, hidden)
        self.heads = [Linear(rng, D_TEACHER, D_TEACHER, bias=False) for _ in range(num_teachers)]
        object.__setattr__(self, "history", [])

    def encode(self, images) -> Tensor:
        single = np.asarray(images).ndim == 3
        with no_grad():
            out = self.student(images)
        out = stop_gradient(out)
        return out[0] if single else out

    __call__ = encode

    def freeze(self) -> "DistilledTeacher":
        return self.requires_grad_(False)

    def named_parameters(self, prefix: str = ""):
        yield from self.student.named_parameters(prefix + "student.")
        for i, h in enumerate(self.heads):
            yield f"{prefix}head.{i}.weight", h.weight


def distill_loss(student: DistilledTeacher, images: np.ndarray, targets: list[np.ndarray]) -> Tensor:
    s = student.student(images)
    total = None
    for head, t in zip(student.heads, targets):
        term = 1.0 - ops.mean(ops.cosine_similarity(head(s), stop_gradient(Tensor._wrap(t))))
        total = term if total is None else total + term
    return total


def distill_teacher(teachers: list[TeacherEncoder], images: np.ndarray, steps: int = 1000,
                    seed: int = 0, lr: float = 1e-3, batch_size: int = 32) -> DistilledTeacher:
    """Train a small student to match every teacher through its own head, then freeze it.

    The loss trajectory is kept on ``student.history``.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ConfigError("distillation needs a non-empty image set")
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    targets = [t.encode(images).data for t in teachers]
    student = DistilledTeacher(seed=seed, num_teachers=len(teachers))
    opt = Adam(student.parameters(), lr=lr, clip_norm=None)
    rng = np.random.default_rng([seed, 12])
    for step in range(steps):
        idx = rng.integers(len(images), size=min(batch_size, len(images)))
        opt.zero_grad()
        loss = distill_loss(student, images[idx], [t[idx] for t in targets])
        loss.backward()
        opt.step()
        student.history.append(float(loss.data))
        if step % 200 == 0:
            log.debug("distill step %d loss %.4f", step, float(loss.data))
    log.info("distillation finished: loss %.4f -> %.4f", student.history[0], student.history[-1])
    return student.freeze()

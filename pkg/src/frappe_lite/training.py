"""Two-stage training: full-parameter mid-training against one distilled
teacher, then frozen-backbone post-training of prefix/LoRA experts against
several teachers. Also the paradigm runners used for comparisons."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import env
from .alignment import align_loss_single, align_losses_stacked
from .autograd import Tensor, gradcheck_params, ops
from .checkpoint import save_checkpoint
from .data import DataError
from .diffusion import action_loss, noise_actions_ab
from .mipa import ConfigError, ExpertSet, load_balance_loss
from .nn import registry_hash
from .optim import Adam
from .policy import PolicyModel

log = logging.getLogger(__name__)


EXPERT_PREFIXES = ("expert.", "router.")
TEACHER_PREFIX = "theia_lite."


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 0.05
    lambda2: float = 0.01
    smoothing: float = 0.1
    horizon: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 1.0
    batch_size: int = 16
    mid_steps: int = 3000
    post_steps: int = 1000
    seed: int = 0
    ratios: tuple = (1.0, 0.0, 0.0)
    num_experts: int = 3
    rank: int = 1
    lora_alpha: float = 8.0
    use_lora: bool = True
    log_every: int = 100

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if self.mid_steps < 0 or self.post_steps < 0 or self.mid_steps + self.post_steps <= 0:
            raise ConfigError("mid_steps + post_steps must be positive")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError("smoothing must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    # flat key=value text, keys are the field names
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"config line {n}: unknown key {key!r}")
            values[key] = _parse_value(types[key], val, key)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _parse_value(kind: str, val: str, key: str):
    try:
        if kind == "bool":
            if val.lower() not in ("true", "false", "1", "0"):
                raise ValueError(val)
            return val.lower() in ("true", "1")
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
        if kind == "tuple":
            return tuple(float(x) for x in val.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {val!r}") from exc
    return val


# ---------------------------------------------------------- trainable sets


@dataclass
class TrainableSetSpec:
    stage: str
    names: list

    def __post_init__(self):
        if self.stage not in ("mid", "post"):
            raise ConfigError(f"unknown stage {self.stage!r}")


def trainable_set(stage: str, model: PolicyModel, experts: ExpertSet | None = None) -> TrainableSetSpec:
    """Mid: every policy parameter (its prefix bank and projection included).
    Post: only expert prefixes, LoRA matrices, projections and the router."""
    if stage == "mid":
        return TrainableSetSpec("mid", [n for n, _ in model.named_parameters()])
    if experts is None:
        raise ConfigError("post stage needs an expert set")
    return TrainableSetSpec("post", [n for n, _ in experts.named_parameters()])


def registry(model: PolicyModel, experts: ExpertSet | None = None, teacher=None) -> "OrderedDict[str, Tensor]":
    """Checkpoint registry: policy names as-is, ``expert.{i}.*`` / ``router.*``
    for the expert set and ``theia_lite.*`` for the distilled teacher."""
    reg = OrderedDict(model.named_parameters())
    if experts is not None:
        reg.update(experts.named_parameters())
    if teacher is not None:
        reg.update((TEACHER_PREFIX + n, p) for n, p in teacher.named_parameters())
    return reg


def frozen_hash(reg: dict, spec: TrainableSetSpec) -> str:
    allowed = set(spec.names)
    return registry_hash([(n, p) for n, p in reg.items() if n not in allowed])


# ------------------------------------------------------------------ losses


def prepare_batch(batch: dict, schedule, rng: np.random.Generator) -> dict:
    """Attach diffusion timesteps k, noise and the noised action chunks."""
    if not len(batch.get("obs", ())):
        raise DataError("empty batch")
    if batch.get("future_obs") is None or len(batch["future_obs"]) != len(batch["obs"]):
        raise DataError("batch is missing future frames")
    out = dict(batch)
    B = len(batch["obs"])
    k = rng.integers(1, schedule.K + 1, size=B)
    eps = rng.standard_normal(batch["actions"].shape).astype(np.float32)
    out["k"] = k
    out["noise"] = eps
    out["noisy"] = noise_actions_ab(batch["actions"].astype(np.float32), schedule.ab(k), eps)
    return out


@dataclass
class LossParts:
    total: Tensor
    action: Tensor
    align: Tensor
    balance: Tensor | None = None
    align_each: Tensor | None = None
    weights: np.ndarray | None = None

    def floats(self) -> dict:
        out = {
            "loss_total": float(self.total.data),
            "loss_action": float(self.action.data),
            "loss_align": float(self.align.data),
            "loss_balance": float(self.balance.data) if self.balance is not None else 0.0,
        }
        if self.align_each is not None:
            for i, v in enumerate(np.atleast_1d(self.align_each.data)):
                out[f"loss_align_{i}"] = float(v)
        if self.weights is not None:
            for i, v in enumerate(self.weights):
                out[f"w_{i}"] = float(v)
        return out


def teacher_targets(teachers, future_obs: np.ndarray) -> np.ndarray:
    """Stacked (M, B, 4, d_Φ) embeddings of the future frames."""
    return np.stack([t.encode(future_obs).data for t in teachers])


def total_loss(batch: dict, stage: str, model: PolicyModel, experts: ExpertSet | None = None,
               teachers=None, config: TrainConfig | None = None, targets: np.ndarray | None = None,
               align: bool = True) -> LossParts:
    """L_action + λ1·L_align (+ λ2·L_balance in the post stage).

    ``batch`` must already carry k/noise/noisy (see :func:`prepare_batch`).
    ``teachers`` is the single distilled teacher (mid) or a list of M teachers
    (post). Samples without actions only feed the alignment term.
    """
    cfg = config or TrainConfig()
    if not len(batch.get("obs", ())):
        raise DataError("empty batch")
    if batch.get("future_obs") is None or len(batch["future_obs"]) != len(batch["obs"]):
        raise DataError("batch is missing future frames")
    mask = np.asarray(batch["has_actions"], dtype=bool)
    args = (batch["obs"], batch["proprio"], batch["instruction"], batch["noisy"], batch["k"])
    use_align = align and (cfg.lambda1 > 0 or stage == "post")
    if stage == "mid":
        out = model.forward(*args, with_prefix=use_align)
        pred = model.decode(out.latents[0])
        l_action = action_loss(pred, batch["actions"], mask)
        if use_align:
            if targets is None:
                targets = teachers.encode(batch["future_obs"]).data[None]
            l_align = align_loss_single(out.prefix[0], model.align_proj, Tensor._wrap(targets[0]))
        else:
            l_align = Tensor(0.0)
        total = l_action + l_align * cfg.lambda1
        return LossParts(total, l_action, l_align)
    if stage != "post":
        raise ConfigError(f"unknown stage {stage!r}")
    if experts is None:
        raise ConfigError("post stage needs experts")
    res = experts.run(model, *args, with_prefix=True)
    l_action = action_loss(res.actions, batch["actions"], mask)
    if targets is None:
        if len(teachers) != experts.num_experts:
            raise ConfigError(f"{experts.num_experts} experts but {len(teachers)} teachers")
        targets = teacher_targets(teachers, batch["future_obs"])
    each = align_losses_stacked(res.prefix, experts.projections(), targets)
    l_align = ops.sum(each)
    l_balance = load_balance_loss(res.logits)
    total = l_action + l_align * cfg.lambda1 + l_balance * cfg.lambda2
    return LossParts(total, l_action, l_align, l_balance, each, res.weights.data.mean(axis=0))


# ---------------------------------------------------------------- loops


@dataclass
class StageResult:
    stage: str
    history: list = field(default_factory=list)
    checkpoint_hash: str | None = None
    frozen_hash_before: str | None = None
    frozen_hash_after: str | None = None

    def series(self, key: str) -> np.ndarray:
        return np.array([h[key] for h in self.history])

    def smoothed(self, key: str, window: int = 100) -> tuple[float, float]:
        """Mean of the first and of the last ``window`` entries."""
        s = self.series(key)
        w = max(1, min(window, len(s) // 2 or 1))
        return float(s[:w].mean()), float(s[-w:].mean())


class MetricsWriter:
    def __init__(self, path, columns: list[str]):
        self.path = Path(path) if path is not None else None
        self.columns = columns
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(columns)
        self._buf = []

    def add(self, row: dict):
        if self.path is not None:
            self._buf.append([row.get(c, "") for c in self.columns])
            if len(self._buf) >= 200:
                self.flush()

    def flush(self):
        if self.path is not None and self._buf:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerows(self._buf)
            self._buf = []


def _columns(num_experts: int = 0) -> list[str]:
    cols = ["step", "loss_total", "loss_action", "loss_align"]
    cols += [f"loss_align_{i}" for i in range(num_experts)]
    cols += ["loss_balance"] + [f"w_{i}" for i in range(num_experts)] + ["grad_norm"]
    return cols


def _run_loop(stage, steps, sampler, loss_fn, params, cfg, metrics_path, dump_fn) -> list:
    opt = Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), clip_norm=cfg.clip_norm)
    history = []
    writer = None
    for step in range(steps):
        batch = next(sampler)
        opt.zero_grad()
        parts = loss_fn(batch)
        row = parts.floats()
        if writer is None:
            writer = MetricsWriter(metrics_path, _columns(len([k for k in row if k.startswith("w_")])))
        if not math.isfinite(row["loss_total"]):
            _abort(stage, step, row, dump_fn, writer)
        parts.total.backward()
        row["grad_norm"] = opt.grad_norm()
        if not math.isfinite(row["grad_norm"]):
            _abort(stage, step, row, dump_fn, writer)
        opt.step()
        row["step"] = step
        history.append(row)
        writer.add(row)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("%s step %d total %.4f action %.4f align %.4f", stage, step,
                     row["loss_total"], row["loss_action"], row["loss_align"])
    if writer is not None:
        writer.flush()
    return history


def _abort(stage, step, row, dump_fn, writer):
    if writer is not None:
        writer.flush()
    where = dump_fn() if dump_fn is not None else None
    msg = f"{stage} training hit a non-finite value at step {step}: {row}"
    if where:
        msg += f"; last good parameters written to {where}"
    raise TrainingError(msg)


def _check_frozen(module, what: str):
    live = [n for n, p in module.named_parameters() if p.requires_grad]
    if live:
        raise ConfigError(f"{what} must be frozen; trainable: {live[:3]}")


def mid_train(model: PolicyModel, teacher, sampler: Iterator[dict], config: TrainConfig,
              steps: int | None = None, metrics_path=None, checkpoint_path=None,
              align: bool = True) -> StageResult:
    """Full-parameter training with L_action + λ1·L_Φ against one frozen teacher.

    ``align=False`` gives plain action-only fine-tuning (no prefix stream).
    """
    if align:
        _check_frozen(teacher, "distilled teacher")
    steps = config.mid_steps if steps is None else steps
    rng = np.random.default_rng([config.seed, 21])
    model.requires_grad_(True)
    spec = trainable_set("mid", model)
    teacher_hash = registry_hash(list(teacher.named_parameters())) if teacher is not None else None

    def loss_fn(batch):
        batch = prepare_batch(batch, model.schedule, rng)
        return total_loss(batch, "mid", model, teachers=teacher, config=config, align=align)

    params = model.parameters()
    if not align:
        params = [p for n, p in model.named_parameters() if n not in ("prefix", "align_proj")]
    dump = _dumper(checkpoint_path, lambda: registry(model, teacher=teacher))
    history = _run_loop("mid", steps, sampler, loss_fn, params, config, metrics_path, dump)
    if teacher is not None and registry_hash(list(teacher.named_parameters())) != teacher_hash:
        raise TrainingError("teacher parameters changed during mid-training")
    result = StageResult("mid", history, frozen_hash_before=teacher_hash, frozen_hash_after=teacher_hash)
    if checkpoint_path is not None:
        result.checkpoint_hash = save_checkpoint(checkpoint_path, registry(model, teacher=teacher))
    log.debug("mid trainable set: %d tensors", len(spec.names))
    return result


def init_experts(model: PolicyModel, config: TrainConfig, num_teachers: int) -> ExpertSet:
    if config.num_experts != num_teachers:
        raise ConfigError(f"num_experts={config.num_experts} but {num_teachers} teachers were given")
    prefix = model.prefix.data if model.prefix is not None else None
    return ExpertSet(model, num_experts=config.num_experts, rank=config.rank, alpha=config.lora_alpha,
                     smoothing=config.smoothing, seed=config.seed, prefix_init=prefix, use_lora=config.use_lora)


def post_train(model: PolicyModel, teachers: list, sampler: Iterator[dict], config: TrainConfig,
               experts: ExpertSet | None = None, steps: int | None = None, metrics_path=None,
               checkpoint_path=None) -> tuple[ExpertSet, StageResult]:
    """Frozen backbone; M experts (prefix copied from the mid bank, zero-init
    LoRA, fresh router) trained on action + λ1·Σ align_i + λ2·balance."""
    for t in teachers:
        _check_frozen(t, "teacher")
    experts = experts or init_experts(model, config, len(teachers))
    if experts.num_experts != len(teachers):
        raise ConfigError(f"{experts.num_experts} experts but {len(teachers)} teachers")
    steps = config.post_steps if steps is None else steps
    rng = np.random.default_rng([config.seed, 22])
    model.requires_grad_(False)
    experts.requires_grad_(True)
    spec = trainable_set("post", model, experts)
    reg = registry(model, experts)
    before = frozen_hash(reg, spec)
    teacher_hashes = [registry_hash(list(t.named_parameters())) for t in teachers]

    def loss_fn(batch):
        batch = prepare_batch(batch, model.schedule, rng)
        targets = teacher_targets(teachers, batch["future_obs"])
        return total_loss(batch, "post", model, experts, config=config, targets=targets)

    dump = _dumper(checkpoint_path, lambda: registry(model, experts))
    history = _run_loop("post", steps, sampler, loss_fn, experts.parameters(), config, metrics_path, dump)
    after = frozen_hash(registry(model, experts), spec)
    if after != before:
        raise TrainingError("frozen parameters changed during post-training")
    if [registry_hash(list(t.named_parameters())) for t in teachers] != teacher_hashes:
        raise TrainingError("teacher parameters changed during post-training")
    result = StageResult("post", history, frozen_hash_before=before, frozen_hash_after=after)
    if checkpoint_path is not None:
        result.checkpoint_hash = save_checkpoint(checkpoint_path, registry(model, experts))
    return experts, result


def _dumper(checkpoint_path, reg_fn):
    if checkpoint_path is None:
        return None

    def dump():
        path = Path(str(checkpoint_path) + ".lastgood")
        save_checkpoint(path, reg_fn())
        return str(path)

    return dump


def load_experts(model: PolicyModel, tensors: dict, smoothing: float = 0.1, seed: int = 0) -> ExpertSet | None:
    """Rebuild an ExpertSet from ``experts.*`` entries of a combined checkpoint."""
    names = [k for k in tensors if k.startswith(EXPERT_PREFIXES)]
    if not names:
        return None
    num = 1 + max(int(k.split(".")[1]) for k in names if k.startswith("expert."))
    use_lora = any(".lora." in k for k in names)
    rank = 1
    for k in names:
        if k.endswith(".A"):
            rank = tensors[k].shape[0]
            break
    experts = ExpertSet(model, num_experts=num, rank=rank, smoothing=smoothing, seed=seed, use_lora=use_lora)
    experts.load_state_dict(OrderedDict((k, tensors[k]) for k in names))
    return experts


def load_policy(tensors: dict, seed: int = 0) -> PolicyModel:
    model = PolicyModel(seed=seed)
    model.load_state_dict(OrderedDict((k, v) for k, v in tensors.items()
                                      if not k.startswith(EXPERT_PREFIXES + (TEACHER_PREFIX,))))
    return model


# ------------------------------------------------------------- paradigms

PARADIGMS = {
    0: "plain fine-tune (action only, full parameters)",
    3: "post-train only (prefix & LoRA on the untuned base)",
    5: "mid-train + post-train (prefix only)",
    6: "mid-train + post-train (prefix & LoRA)",
}


@dataclass
class ParadigmRun:
    paradigm: int
    seed: int
    model: PolicyModel
    experts: ExpertSet | None
    stages: list
    success: float | None = None

    def policy(self, steps: int | None = None):
        return self.model.as_policy(self.experts, steps)


def run_paradigm(paradigm: int, sampler_factory, distilled, teachers, config: TrainConfig,
                 mid: tuple | None = None) -> ParadigmRun:
    """Train one paradigm from the seeded base initialization.

    ``sampler_factory(seed)`` yields fresh batch iterators; ``mid`` may pass a
    (model_state, StageResult) pair from an earlier mid-training run with the
    same config and seed so paradigms 5 and 6 can share it.
    """
    if paradigm not in PARADIGMS:
        raise ConfigError(f"unknown paradigm {paradigm}")
    seed = config.seed
    model = PolicyModel(seed=seed)
    stages = []
    if paradigm == 0:
        res = mid_train(model, None, sampler_factory(seed), config,
                        steps=config.mid_steps + config.post_steps, align=False)
        model.requires_grad_(False)
        return ParadigmRun(0, seed, model, None, [res])
    if paradigm in (5, 6):
        if mid is not None:
            model.load_state_dict(mid[0])
            stages.append(mid[1])
        else:
            stages.append(mid_train(model, distilled, sampler_factory(seed), config))
    cfg = dataclasses.replace(config, use_lora=paradigm != 5)
    experts, res = post_train(model, teachers, sampler_factory(seed + 7919), cfg)
    stages.append(res)
    experts.requires_grad_(False)
    return ParadigmRun(paradigm, seed, model, experts, stages)


def evaluate_run(run: ParadigmRun, episodes: int = 50, difficulty: str = env.EASY, seed: int = 1234,
                 steps: int | None = None) -> float:
    run.success = env.evaluate(run.policy(steps), difficulty, episodes, seed)
    return run.success


# ------------------------------------------------------------- gradcheck


def pipeline_gradcheck(seed: int = 0, stage: str = "post", coords: int = 20, eps: float = 1e-3) -> dict:
    """Finite-difference check of total_loss on a 1-sample batch.

    ``coords`` random scalar coordinates of the stage's trainable parameters
    are perturbed on the float64 shadow path.
    """
    from .alignment import DistilledTeacher, make_teachers

    rng = np.random.default_rng([seed, 31])
    model = PolicyModel(seed=seed)
    teachers = make_teachers()
    cfg = TrainConfig(seed=seed, lambda1=1.0, lambda2=1.0)
    state = env.sample_layout(rng, env.EASY)
    img = env.render(state)[None]
    batch = {
        "obs": img, "proprio": state.proprio()[None], "instruction": np.array([state.instruction]),
        "actions": rng.uniform(-1, 1, (1, 8, 3)).astype(np.float32), "has_actions": np.array([True]),
        "future_obs": img,
    }
    batch = prepare_batch(batch, model.schedule, rng)
    if stage == "mid":
        teacher = DistilledTeacher(seed=seed).freeze()
        targets = teacher.encode(batch["future_obs"]).data[None]
        named = list(model.named_parameters())
        experts = None
    else:
        experts = init_experts(model, cfg, len(teachers))
        # move away from the zero-init point so every LoRA path carries gradient
        for _, p in experts.named_parameters():
            p.data = (p.data + rng.normal(0, 0.05, p.shape)).astype(np.float32)
        targets = teacher_targets(teachers, batch["future_obs"])
        named = list(experts.named_parameters())
    model.requires_grad_(stage == "mid")
    params = [p for _, p in named]
    picks = rng.choice(len(params), size=coords, replace=True)
    pairs = [(int(i), int(rng.integers(params[i].data.size))) for i in picks]
    shadow = [p for _, p in registry(model, experts).items()]

    def loss():
        return total_loss(batch, stage, model, experts, config=cfg, targets=targets).total

    res = gradcheck_params(loss, params, pairs, eps=eps, shadow=shadow)
    res["names"] = [named[i][0] for i, _ in pairs]
    return res

"""frappe-lite command line: gen-data, distill, mid-train, post-train, eval, gradcheck, inspect.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, data, env
from .alignment import TEACHER_TAGS, DistilledTeacher, distill_teacher, make_teachers
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint, split_prefix
from .mipa import ConfigError
from .training import (TrainConfig, TrainingError, load_experts, load_policy, mid_train, pipeline_gradcheck,
                       post_train, registry)

log = logging.getLogger("frappe_lite")

OPS_THRESHOLD = 1e-4
PIPELINE_THRESHOLD = 1e-3


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    out_dir: str
    started: str
    finished: str | None = None
    extra: dict = field(default_factory=dict)

    def write(self, out_dir):
        path = Path(out_dir) / f"manifest-{self.command}.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return path


def _version() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                              text=True, timeout=5, cwd=Path(__file__).parent)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def _setup_logging():
    level = os.environ.get("FRAPPE_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write to output directory {out}: {exc.strerror}") from exc
    return out


def _config(args) -> TrainConfig:
    """Defaults < config file < flags."""
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    text = Path(args.config).read_text() if args.config else ""
    text += "\n" + "\n".join(f"{k}={v}" for k, v in overrides.items())
    return TrainConfig.from_text(text)


def _manifest(command, cfg_dict, seed, out) -> RunManifest:
    m = RunManifest(command, cfg_dict, seed, _version(), str(out), _now())
    m.write(out)
    return m


def _finish(m: RunManifest, out, **extra):
    m.finished = _now()
    m.extra.update(extra)
    m.write(out)


def _datasets(directory, horizon=8):
    sets = data.load_datasets(directory, horizon=horizon)
    if not sets:
        raise FileNotFoundError(f"no FTRJ dataset files found in {directory}")
    return sets


def _sampler(sets, cfg: TrainConfig, seed):
    return data.build_cotrain_sampler(sets.get("robot"), sets.get("ego_task"), sets.get("ego_web"),
                                      cfg.ratios, seed, cfg.batch_size)


def _load_teacher(path) -> DistilledTeacher:
    tensors = split_prefix(load_checkpoint(path), "theia_lite.")
    if not tensors:
        raise CheckpointFormatError(f"{path}: no theia_lite.* tensors")
    heads = sum(1 for k in tensors if k.startswith("head."))
    hidden = tensors["student.fc1.weight"].shape[1]
    teacher = DistilledTeacher(num_teachers=heads, hidden=hidden)
    teacher.load_state_dict(tensors)
    return teacher.freeze()


# ------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    out = _out_dir(args.out)
    counts = {"robot": args.robot, "ego_task": args.ego_task, "ego_web": args.ego_web}
    if any(v < 0 for v in counts.values()):
        raise UsageError("episode counts must be >= 0")
    m = _manifest("gen-data", counts, args.seed, out)
    result = data.generate_datasets(counts, args.seed, out)
    for source in data.SOURCES:
        print(f"{out / data.FILE_NAMES[source]}: {len(result[source])} episodes")
    _finish(m, out)
    return 0


def cmd_distill(args) -> int:
    out = _out_dir(args.out)
    sets = _datasets(args.data)
    images = np.concatenate([ds.obs for ds in sets.values() if len(ds)])
    m = _manifest("distill", {"steps": args.steps, "lr": args.lr, "teachers": list(TEACHER_TAGS)}, args.seed, out)
    teacher = distill_teacher(make_teachers(), images, steps=args.steps, seed=args.seed, lr=args.lr)
    with open(out / "distill_metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows(enumerate(teacher.history))
    digest = save_checkpoint(out / "distilled.frap",
                             [(f"theia_lite.{n}", p) for n, p in teacher.named_parameters()])
    print(f"distillation loss {teacher.history[0]:.4f} -> {teacher.history[-1]:.4f}")
    print(f"wrote {out / 'distilled.frap'} sha256={digest}")
    _finish(m, out, checkpoint_sha256=digest)
    return 0


def cmd_mid_train(args) -> int:
    from .policy import PolicyModel

    cfg = _config(args)
    out = _out_dir(args.out)
    sets = _datasets(args.data, cfg.horizon)
    if not args.teacher:
        raise UsageError("mid-train needs --teacher (a distilled.frap from the distill command)")
    teacher = _load_teacher(args.teacher)
    m = _manifest("mid-train", asdict(cfg), cfg.seed, out)
    model = PolicyModel(seed=cfg.seed)
    res = mid_train(model, teacher, _sampler(sets, cfg, cfg.seed), cfg,
                    metrics_path=out / "mid_metrics.csv", checkpoint_path=out / "mid.frap")
    print(f"wrote {out / 'mid.frap'} sha256={res.checkpoint_hash}")
    _finish(m, out, checkpoint_sha256=res.checkpoint_hash)
    return 0


def cmd_post_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    sets = _datasets(args.data, cfg.horizon)
    tensors = load_checkpoint(args.init)
    model = load_policy(tensors, seed=cfg.seed)
    m = _manifest("post-train", asdict(cfg), cfg.seed, out)
    m.extra["init"] = str(args.init)
    experts, res = post_train(model, make_teachers(), _sampler(sets, cfg, cfg.seed + 7919), cfg,
                              metrics_path=out / "post_metrics.csv", checkpoint_path=out / "post.frap")
    print(f"wrote {out / 'post.frap'} sha256={res.checkpoint_hash}")
    _finish(m, out, checkpoint_sha256=res.checkpoint_hash)
    return 0


def cmd_eval(args) -> int:
    tensors = load_checkpoint(args.checkpoint)
    model = load_policy(tensors)
    experts = load_experts(model, tensors)
    if args.experts == "require" and experts is None:
        raise ConfigError(f"{args.checkpoint} is a mid-stage checkpoint: no expert tensors to evaluate")
    if args.experts == "none":
        experts = None
    model.requires_grad_(False)
    rate = env.evaluate(model.as_policy(experts, args.steps), args.difficulty, args.episodes, args.seed)
    successes = int(round(rate * args.episodes))
    out = _out_dir(args.out)
    path = out / "eval.csv"
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["task", "difficulty", "episodes", "successes", "seed", "steps", "checkpoint"])
        w.writerow(["pick-place", args.difficulty, args.episodes, successes, args.seed, args.steps,
                    str(args.checkpoint)])
    stage = "post" if experts is not None else "mid"
    print(f"{args.difficulty} success {rate:.3f} ({successes}/{args.episodes}) steps={args.steps} stage={stage}")
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    if args.scope == "ops":
        from .autograd.checks import check_ops

        for name, err in check_ops(args.seed).items():
            flag = "ok" if err < OPS_THRESHOLD else "FAIL"
            ok &= err < OPS_THRESHOLD
            print(f"{name:<18} max_rel_error={err:.3e} {flag}")
    else:
        for stage in ("mid", "post"):
            res = pipeline_gradcheck(args.seed, stage)
            err = res["max_rel_error"]
            flag = "ok" if err < PIPELINE_THRESHOLD else "FAIL"
            ok &= err < PIPELINE_THRESHOLD
            print(f"total_loss[{stage}] max_rel_error={err:.3e} {flag}")
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    tensors = load_checkpoint(args.checkpoint)
    total = 0
    for name, arr in tensors.items():
        total += arr.size
        print(f"{name}\t{tuple(arr.shape)}")
    print(f"{len(tensors)} tensors, {total} values")
    return 0


# -------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frappe-lite", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate robot / ego-task / ego-web datasets")
    g.add_argument("--robot", type=int, default=20)
    g.add_argument("--ego-task", type=int, default=50)
    g.add_argument("--ego-web", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    d = sub.add_parser("distill", help="distill the three teachers into one small encoder")
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--steps", type=int, default=1000)
    d.add_argument("--lr", type=float, default=1e-3)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--config", help="accepted for symmetry; distillation has no config keys")
    d.set_defaults(fn=cmd_distill)

    for name, fn, help_ in (("mid-train", cmd_mid_train, "stage 1: full-parameter training with one teacher"),
                            ("post-train", cmd_post_train, "stage 2: prefix/LoRA experts on a frozen backbone")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="flat key=value file with TrainConfig fields")
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if name == "mid-train":
            s.add_argument("--teacher", help="distilled teacher checkpoint")
        else:
            s.add_argument("--init", required=True, help="mid-train checkpoint")
        s.set_defaults(fn=fn)

    e = sub.add_parser("eval", help="closed-loop success rate of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--difficulty", choices=[env.EASY, env.HARD], default=env.EASY)
    e.add_argument("--episodes", type=int, default=50)
    e.add_argument("--steps", type=int, choices=[3, 5], default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--experts", choices=["auto", "require", "none"], default="auto")
    e.add_argument("--out", default=".")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scope", choices=["ops", "pipeline"], default="ops")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    i = sub.add_parser("inspect", help="list checkpoint tensor names and shapes")
    i.add_argument("checkpoint")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ConfigError, CheckpointFormatError, data.DatasetFormatError, data.DataError,
            OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Trajectory datasets: generation, the FTRJ binary format, batching and co-training mixes.

FTRJ layout (little-endian)::

    b"FTRJ" | version u32 | source u8 | has_actions u8 | episode_count u32
    per episode: step_count u32 | instruction u32 | difficulty u8
        per step: observation u8[3*32*32] | proprio f32[5] | action f32[3] (only if has_actions)

Observations are stored as uint8; renders are already quantized to 1/255.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import env

MAGIC = b"FTRJ"
VERSION = 1
SOURCES = ("robot", "ego_task", "ego_web")
FILE_NAMES = {s: f"{s}.ftrj" for s in SOURCES}
OBS_SHAPE = (3, env.IMAGE_SIZE, env.IMAGE_SIZE)
OBS_BYTES = int(np.prod(OBS_SHAPE))
PROPRIO_DIM = 5
ACTION_DIM = 3


class DatasetFormatError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class Episode:
    source: str
    instruction: int
    difficulty: str
    observations: np.ndarray  # (T, 3, 32, 32) float32
    proprio: np.ndarray  # (T, 5) float32
    actions: np.ndarray | None = None  # (T, 3) float32; None for action-free sources

    @property
    def has_actions(self) -> bool:
        return self.actions is not None

    def __len__(self):
        return len(self.observations)


@dataclass
class TrajectoryRecord:
    observation: np.ndarray
    proprio: np.ndarray
    instruction: int
    future_observation: np.ndarray
    action_chunk: np.ndarray | None
    source: str

    @property
    def has_actions(self) -> bool:
        return self.action_chunk is not None


class TrajectoryDataset:
    """Episodes of one source, indexable per step.

    ``horizon`` is the future-frame offset h and ``chunk`` the action-chunk
    length; both pad past the episode end by repeating the final step.
    """

    def __init__(self, episodes: list[Episode], source: str, horizon: int = 8, chunk: int = 8):
        for ep in episodes:
            if ep.source != source:
                raise DataError(f"episode source {ep.source!r} in a {source!r} dataset")
        self.episodes = episodes
        self.source = source
        self.horizon = horizon
        self.chunk = chunk
        self.has_actions = source == "robot"
        for ep in episodes:
            if ep.has_actions != self.has_actions:
                raise DataError(f"{source} episodes must {'' if self.has_actions else 'not '}carry actions")
        self._build()

    def _build(self):
        obs, prop, instr, fut, act_idx, ep_of = [], [], [], [], [], []
        offset = 0
        acts = []
        for e, ep in enumerate(self.episodes):
            T = len(ep)
            t = np.arange(T)
            obs.append(ep.observations)
            prop.append(ep.proprio)
            instr.append(np.full(T, ep.instruction))
            fut.append(offset + np.minimum(t + self.horizon, T - 1))
            act_idx.append(offset + np.minimum(t[:, None] + np.arange(self.chunk)[None, :], T - 1))
            ep_of.append(np.full(T, e))
            if ep.has_actions:
                acts.append(ep.actions)
            offset += T
        empty = (0,)
        self.obs = np.concatenate(obs) if obs else np.zeros(empty + OBS_SHAPE, np.float32)
        self.proprio = np.concatenate(prop) if prop else np.zeros((0, PROPRIO_DIM), np.float32)
        self.instruction = np.concatenate(instr).astype(np.int64) if instr else np.zeros(0, np.int64)
        self.future_index = np.concatenate(fut) if fut else np.zeros(0, np.int64)
        self.chunk_index = np.concatenate(act_idx) if act_idx else np.zeros((0, self.chunk), np.int64)
        self.episode_of = np.concatenate(ep_of) if ep_of else np.zeros(0, np.int64)
        self.actions = np.concatenate(acts) if acts else None

    def __len__(self):
        return len(self.obs)

    def record(self, i: int) -> TrajectoryRecord:
        chunk = self.actions[self.chunk_index[i]] if self.has_actions else None
        return TrajectoryRecord(self.obs[i], self.proprio[i], int(self.instruction[i]),
                                self.obs[self.future_index[i]], chunk, self.source)

    def future_frames(self) -> np.ndarray:
        return self.obs[self.future_index]

    def batch(self, idx: np.ndarray) -> dict:
        idx = np.asarray(idx)
        n = len(idx)
        if self.has_actions:
            actions = self.actions[self.chunk_index[idx]]
        else:
            actions = np.zeros((n, self.chunk, ACTION_DIM), np.float32)
        return {
            "obs": self.obs[idx],
            "proprio": self.proprio[idx],
            "instruction": self.instruction[idx],
            "actions": actions,
            "has_actions": np.full(n, self.has_actions),
            "future_obs": self.obs[self.future_index[idx]],
            "source": np.full(n, self.source),
            "index": idx,
        }


def merge_batches(parts: list[dict]) -> dict:
    parts = [p for p in parts if len(p["obs"])]
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# ---------------------------------------------------------------- generation


def _expert_episode(rng, difficulty, shape="disc", instruction=None, sprite="gripper"):
    for _ in range(20):
        state = env.sample_layout(rng, difficulty, shape=shape, instruction=instruction)
        obs, prop, acts, final = env.run_episode(state, env.scripted_expert, sprite=sprite)
        if final.success:
            return obs, prop, acts, state
    raise RuntimeError("scripted expert could not solve 20 consecutive layouts")


def _web_layout_instruction(rng):
    return env.NUM_COLORS + int(rng.integers(env.VOCAB_SIZE - env.NUM_COLORS))


def generate_episodes(source: str, count: int, seed: int) -> list[Episode]:
    """Robot demos (Easy, with actions), task-specific ego clips (same tasks,
    hand sprite, no actions) or web-style ego clips (square objects, Hard-style
    randomization, different instruction ids, no actions)."""
    if count < 0:
        raise ValueError("counts must be >= 0")
    rng = np.random.default_rng([seed, SOURCES.index(source)])
    episodes = []
    for _ in range(count):
        if source == "robot":
            obs, prop, acts, s0 = _expert_episode(rng, env.EASY)
            episodes.append(Episode(source, s0.instruction, env.EASY, obs, prop, acts))
        elif source == "ego_task":
            obs, prop, _, s0 = _expert_episode(rng, env.EASY, sprite="hand")
            episodes.append(Episode(source, s0.instruction, env.EASY, obs, prop, None))
        elif source == "ego_web":
            instr = _web_layout_instruction(rng)
            obs, prop, _, s0 = _expert_episode(rng, env.HARD, shape="square", instruction=instr, sprite="hand")
            episodes.append(Episode(source, s0.instruction, env.HARD, obs, prop, None))
        else:
            raise ValueError(f"unknown source {source!r}")
    return episodes


def generate_datasets(counts: dict, seed: int, out_dir: str | os.PathLike | None = None) -> dict:
    """Build the three data-pyramid layers; optionally write one FTRJ file each."""
    result = {}
    for source in SOURCES:
        eps = generate_episodes(source, int(counts.get(source, 0)), seed)
        result[source] = eps
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_ftrj(Path(out_dir) / FILE_NAMES[source], eps, source)
    return result


# ------------------------------------------------------------------- FTRJ io

_DIFF = {env.EASY: 0, env.HARD: 1}
_DIFF_INV = {v: k for k, v in _DIFF.items()}


def write_ftrj(path, episodes: list[Episode], source: str) -> None:
    has_actions = source == "robot"
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBBI", VERSION, SOURCES.index(source), int(has_actions), len(episodes)))
        for ep in episodes:
            if ep.has_actions != has_actions:
                raise DataError(f"{source} episode with has_actions={ep.has_actions}")
            T = len(ep)
            f.write(struct.pack("<IIB", T, ep.instruction, _DIFF[ep.difficulty]))
            obs_u8 = np.round(ep.observations.reshape(T, -1) * 255.0).astype(np.uint8)
            prop = ep.proprio.astype("<f4").reshape(T, -1)
            for t in range(T):
                f.write(obs_u8[t].tobytes())
                f.write(prop[t].tobytes())
                if has_actions:
                    f.write(ep.actions[t].astype("<f4").tobytes())


def read_ftrj(path) -> tuple[str, list[Episode]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, src, has_actions, n_eps = struct.unpack_from("<IBBI", blob, 4)
    except struct.error as exc:
        raise DatasetFormatError(f"{path}: truncated header") from exc
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    source = SOURCES[src]
    pos = 4 + struct.calcsize("<IBBI")
    step_bytes = OBS_BYTES + 4 * PROPRIO_DIM + (4 * ACTION_DIM if has_actions else 0)
    step_dtype = [("obs", "u1", OBS_BYTES), ("proprio", "<f4", PROPRIO_DIM)]
    if has_actions:
        step_dtype.append(("action", "<f4", ACTION_DIM))
    episodes = []
    for _ in range(n_eps):
        if pos + 9 > len(blob):
            raise DatasetFormatError(f"{path}: truncated episode header")
        T, instr, diff = struct.unpack_from("<IIB", blob, pos)
        pos += 9
        end = pos + T * step_bytes
        if end > len(blob):
            raise DatasetFormatError(f"{path}: truncated step data")
        rec = np.frombuffer(blob[pos:end], dtype=np.dtype(step_dtype))
        pos = end
        obs = (rec["obs"].astype(np.float32) / 255.0).reshape((T,) + OBS_SHAPE)
        acts = rec["action"].astype(np.float32) if has_actions else None
        episodes.append(Episode(source, int(instr), _DIFF_INV[diff], obs, rec["proprio"].astype(np.float32), acts))
    if pos != len(blob):
        raise DatasetFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return source, episodes


def load_datasets(directory, horizon: int = 8, chunk: int = 8) -> dict:
    out = {}
    for source in SOURCES:
        p = Path(directory) / FILE_NAMES[source]
        if p.exists():
            src, eps = read_ftrj(p)
            out[source] = TrajectoryDataset(eps, src, horizon, chunk)
    return out


# ----------------------------------------------------------------- sampling


def build_cotrain_sampler(robot_ds, ego_task_ds, ego_web_ds, ratios, seed: int,
                          batch_size: int = 16) -> Iterator[dict]:
    """Endless batches; each sample picks its source with probability ``ratios``.

    Sources with zero episodes are dropped and the remaining ratios renormalized.
    """
    sets = [robot_ds, ego_task_ds, ego_web_ds]
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r < 0):
        raise ValueError("ratios must be three non-negative numbers")
    if r.sum() == 0:
        raise ValueError("all mixture ratios are zero")
    usable = np.array([ds is not None and len(ds) > 0 for ds in sets])
    if not usable.any():
        raise ValueError("every dataset is empty")
    r = np.where(usable, r, 0.0)
    if r.sum() == 0:
        raise ValueError("non-zero ratios only point at empty datasets")
    p = r / r.sum()
    rng = np.random.default_rng(seed)

    def gen():
        while True:
            src = rng.choice(3, size=batch_size, p=p)
            parts = []
            for k in range(3):
                n = int((src == k).sum())
                if n:
                    parts.append(sets[k].batch(rng.integers(len(sets[k]), size=n)))
            yield merge_batches(parts)

    return gen()


def uniform_sampler(ds: TrajectoryDataset, seed: int, batch_size: int = 16) -> Iterator[dict]:
    return build_cotrain_sampler(ds, None, None, (1, 0, 0), seed, batch_size)

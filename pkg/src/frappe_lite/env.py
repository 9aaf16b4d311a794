"""Deterministic 2-D tabletop world: discs, a goal region and a gripper.

World coordinates live in [-1, 1]^2 with +y up. Observations are 3x32x32
RGB renders quantized to multiples of 1/255 so they survive a uint8
round-trip unchanged.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

IMAGE_SIZE = 32
EPISODE_LEN = 40
MOVE_SCALE = 0.1
GRASP_RADIUS = 0.08
NUM_COLORS = 4
VOCAB_SIZE = 8  # ids 0-3: "move <color> disc to goal"; 4-7: web-style square tasks

COLORS = np.array(
    [
        [0.95, 0.15, 0.15],  # red
        [0.15, 0.85, 0.20],  # green
        [0.20, 0.30, 0.95],  # blue
        [0.95, 0.85, 0.10],  # yellow
    ],
    dtype=np.float64,
)
GOAL_COLOR = np.array([0.55, 0.55, 0.55])
GRIPPER_COLOR = np.array([1.0, 1.0, 1.0])
HAND_COLOR = np.array([0.93, 0.72, 0.58])

EASY, HARD = "easy", "hard"

# randomization support per difficulty; Easy ranges sit inside Hard's
LAYOUT_SUPPORT = {
    EASY: {
        "gripper_xy": (-0.3, 0.3),
        "target_xy": (-0.7, 0.7),
        "goal_center": ((0.55, 0.55), (-0.55, -0.55)),
        "goal_radius": (0.2, 0.2),
        "disc_radius": (0.1, 0.1),
        "background": (0.25, 0.25),
        "lighting": (1.0, 1.0),
        "table_offset": (0.0, 0.0),
        "distractors": (0, 0),
    },
    HARD: {
        "gripper_xy": (-0.3, 0.3),
        "target_xy": (-0.7, 0.7),
        "goal_center": ((0.4, 0.7), (-0.7, -0.4)),
        "goal_radius": (0.2, 0.2),
        "disc_radius": (0.09, 0.11),
        "background": (0.0, 0.45),
        "lighting": (0.75, 1.25),
        "table_offset": (-2.0, 2.0),
        "distractors": (1, 2),
    },
}


@dataclass
class WorldObject:
    x: float
    y: float
    radius: float
    color: int
    held: bool = False
    shape: str = "disc"  # "disc" or "square"


@dataclass
class WorldState:
    gripper: np.ndarray  # (x, y, open_fraction)
    objects: list
    goal: tuple  # (x, y, radius)
    target: int = 0
    instruction: int = 0
    distractors: int = 0
    background: float = 0.25
    lighting: float = 1.0
    table_offset: float = 0.0  # vertical render shift in pixels
    t: int = 0
    ever_held: bool = False
    success: bool = False
    difficulty: str = EASY

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    def held_index(self) -> int | None:
        for i, o in enumerate(self.objects):
            if o.held:
                return i
        return None

    def proprio(self) -> np.ndarray:
        held = 1.0 if self.held_index() is not None else 0.0
        return np.array(
            [self.gripper[0], self.gripper[1], self.gripper[2], held, self.t / EPISODE_LEN],
            dtype=np.float32,
        )


@dataclass
class TaskSpec:
    instruction: int
    difficulty: str = EASY
    episode_len: int = EPISODE_LEN


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def sample_layout(rng: np.random.Generator, difficulty: str = EASY, shape: str = "disc",
                  instruction: int | None = None) -> WorldState:
    """Draw a fresh solvable layout from the difficulty's support."""
    sup = LAYOUT_SUPPORT[difficulty]
    for _ in range(1000):
        gx, gy = (_uniform(rng, sup["gripper_xy"]) for _ in range(2))
        (cx_lo, cx_hi), (cy_lo, cy_hi) = sup["goal_center"]
        goal = (_uniform(rng, (cx_lo, cx_hi)), _uniform(rng, (cy_lo, cy_hi)), _uniform(rng, sup["goal_radius"]))
        color = int(rng.integers(NUM_COLORS))
        tx, ty = (_uniform(rng, sup["target_xy"]) for _ in range(2))
        if np.hypot(tx - goal[0], ty - goal[1]) < goal[2] + 0.2:
            continue
        lo, hi = sup["distractors"]
        n_dis = int(rng.integers(lo, hi + 1))
        objects = [WorldObject(tx, ty, _uniform(rng, sup["disc_radius"]), color, shape=shape)]
        others = [c for c in range(NUM_COLORS) if c != color]
        ok = True
        for k in range(n_dis):
            for _ in range(100):
                dx, dy = (_uniform(rng, sup["target_xy"]) for _ in range(2))
                if all(np.hypot(dx - o.x, dy - o.y) > 0.3 for o in objects) and \
                        np.hypot(dx - goal[0], dy - goal[1]) > goal[2] + 0.1:
                    break
            else:
                ok = False
                break
            objects.append(WorldObject(dx, dy, _uniform(rng, sup["disc_radius"]),
                                       others[int(rng.integers(len(others)))], shape=shape))
        if not ok:
            continue
        state = WorldState(
            gripper=np.array([gx, gy, 1.0]),
            objects=objects,
            goal=goal,
            target=0,
            instruction=color if instruction is None else instruction,
            distractors=n_dis,
            background=_uniform(rng, sup["background"]),
            lighting=_uniform(rng, sup["lighting"]),
            table_offset=_uniform(rng, sup["table_offset"]),
            difficulty=difficulty,
        )
        return state
    raise RuntimeError("could not sample a layout")


def step(state: WorldState, action) -> WorldState:
    """Advance one control step. Moves first, then applies the gripper command."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    s = state.copy()
    s.gripper[0] = float(np.clip(s.gripper[0] + MOVE_SCALE * a[0], -1.0, 1.0))
    s.gripper[1] = float(np.clip(s.gripper[1] + MOVE_SCALE * a[1], -1.0, 1.0))
    held = s.held_index()
    if held is not None:
        s.objects[held].x, s.objects[held].y = s.gripper[0], s.gripper[1]
    if a[2] > 0:
        s.gripper[2] = 0.0
        if held is None:
            dists = [np.hypot(o.x - s.gripper[0], o.y - s.gripper[1]) for o in s.objects]
            if dists:
                i = int(np.argmin(dists))
                if dists[i] <= GRASP_RADIUS:
                    s.objects[i].held = True
                    s.objects[i].x, s.objects[i].y = s.gripper[0], s.gripper[1]
                    if i == s.target:
                        s.ever_held = True
    elif a[2] < 0:
        s.gripper[2] = 1.0
        if held is not None:
            s.objects[held].held = False
    s.t += 1
    tgt = s.objects[s.target]
    if s.ever_held and not tgt.held and np.hypot(tgt.x - s.goal[0], tgt.y - s.goal[1]) <= s.goal[2]:
        s.success = True
    return s


# ------------------------------------------------------------------ render

_pix = np.arange(IMAGE_SIZE, dtype=np.float64)
_U, _V = np.meshgrid(_pix, _pix)  # column, row


def _to_pixels(x, y, offset):
    u = (x + 1.0) * 0.5 * IMAGE_SIZE - 0.5
    v = (1.0 - y) * 0.5 * IMAGE_SIZE - 0.5 + offset
    return u, v


def _disc_cover(u, v, r_px):
    d = np.sqrt((_U - u) ** 2 + (_V - v) ** 2)
    return np.clip(r_px - d + 0.5, 0.0, 1.0)


def _square_cover(u, v, half_px):
    cu = np.clip(half_px - np.abs(_U - u) + 0.5, 0.0, 1.0)
    cv = np.clip(half_px - np.abs(_V - v) + 0.5, 0.0, 1.0)
    return cu * cv


def _blend(img, cover, color, alpha=1.0):
    a = cover * alpha
    img *= 1.0 - a
    img += a * color[:, None, None]


def effector_radius_px(sprite: str) -> float:
    return (0.11 if sprite == "hand" else 0.10) * IMAGE_SIZE / 2


def render(state: WorldState, sprite: str = "gripper") -> np.ndarray:
    """Anti-aliased RGB render, float32 in [0, 1], shape (3, 32, 32)."""
    px = IMAGE_SIZE / 2
    img = np.full((3, IMAGE_SIZE, IMAGE_SIZE), state.background, dtype=np.float64)
    gu, gv = _to_pixels(state.goal[0], state.goal[1], state.table_offset)
    _blend(img, _disc_cover(gu, gv, state.goal[2] * px), GOAL_COLOR, 0.6)
    for o in state.objects:
        u, v = _to_pixels(o.x, o.y, state.table_offset)
        cover = _square_cover(u, v, o.radius * px * 0.9) if o.shape == "square" else _disc_cover(u, v, o.radius * px)
        _blend(img, cover, COLORS[o.color])
    u, v = _to_pixels(state.gripper[0], state.gripper[1], state.table_offset)
    r_out = effector_radius_px(sprite)
    if sprite == "hand":
        _blend(img, _disc_cover(u, v, r_out), HAND_COLOR, 0.9)
        if state.gripper[2] < 0.5:
            _blend(img, _disc_cover(u, v, 0.5 * r_out), HAND_COLOR * 0.6, 0.9)
    else:
        ring = _disc_cover(u, v, r_out)
        inner = 0.6 * r_out * state.gripper[2]
        if inner > 0:
            ring = np.clip(ring - _disc_cover(u, v, inner), 0.0, 1.0)
        _blend(img, ring, GRIPPER_COLOR, 0.9)
    img = np.clip(img * state.lighting, 0.0, 1.0)
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


# ---------------------------------------------------------------- expert


def scripted_expert(state: WorldState, task: TaskSpec | None = None) -> np.ndarray:
    """Proportional pick-and-place controller: approach, close, carry, open."""
    g = state.gripper[:2]
    tgt = state.objects[state.target]
    held = state.held_index()
    goal = np.array(state.goal[:2])
    if held is not None and held != state.target:
        return np.array([0.0, 0.0, -1.0], dtype=np.float32)
    if held == state.target:
        d = goal - g
        if np.hypot(*d) <= 0.05:
            return np.array([0.0, 0.0, -1.0], dtype=np.float32)
        return np.array([*np.clip(d / MOVE_SCALE, -1, 1), 1.0], dtype=np.float32)
    if np.hypot(tgt.x - goal[0], tgt.y - goal[1]) <= state.goal[2] and state.ever_held:
        return np.array([0.0, 0.0, -1.0], dtype=np.float32)
    d = np.array([tgt.x, tgt.y]) - g
    if np.hypot(*d) <= 0.02:
        return np.array([0.0, 0.0, 1.0], dtype=np.float32)
    return np.array([*np.clip(d / MOVE_SCALE, -1, 1), -1.0], dtype=np.float32)


def run_episode(state: WorldState, policy_step: Callable[[WorldState], np.ndarray],
                length: int = EPISODE_LEN, sprite: str = "gripper"):
    """Roll out a per-step policy; returns (observations, proprios, actions, final_state)."""
    obs, prop, acts = [], [], []
    s = state
    for _ in range(length):
        obs.append(render(s, sprite))
        prop.append(s.proprio())
        a = np.clip(np.asarray(policy_step(s), dtype=np.float32), -1, 1)
        acts.append(a)
        s = step(s, a)
    return np.stack(obs), np.stack(prop), np.stack(acts), s


# ------------------------------------------------------------- evaluation


@dataclass
class PolicyInput:
    """What a chunk policy sees at a re-planning point (batched over episodes)."""

    images: np.ndarray  # (E, 3, 32, 32)
    proprio: np.ndarray  # (E, 5)
    instruction: np.ndarray  # (E,)
    seed: int
    states: list = field(default_factory=list)  # privileged; only scripted policies read it


# policy(PolicyInput) -> (E, T_a, 3)
ChunkPolicy = Callable[[PolicyInput], np.ndarray]


def evaluate(policy: ChunkPolicy, difficulty: str = EASY, episodes: int = 50, seed: int = 0,
             chunk: int = 8, length: int = EPISODE_LEN) -> float:
    """Closed-loop success rate over fresh layouts.

    All episodes step in lockstep; the policy is queried once per chunk and
    its ``chunk`` actions are executed open-loop before re-planning.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    states = [sample_layout(rng, difficulty) for _ in range(episodes)]
    t, call = 0, 0
    while t < length:
        inp = PolicyInput(
            images=np.stack([render(s) for s in states]),
            proprio=np.stack([s.proprio() for s in states]),
            instruction=np.array([s.instruction for s in states]),
            seed=seed * 1000 + call,
            states=states,
        )
        chunks = np.asarray(policy(inp))
        call += 1
        for j in range(min(chunk, length - t)):
            states = [step(s, chunks[e, j]) for e, s in enumerate(states)]
        t += chunk
    return float(np.mean([s.success for s in states]))


def expert_policy(chunk: int = 8) -> ChunkPolicy:
    """The scripted expert as a chunk policy (plans ahead on a copy of the state)."""

    def policy(inp: PolicyInput) -> np.ndarray:
        out = np.zeros((len(inp.states), chunk, 3), dtype=np.float32)
        for e, s in enumerate(inp.states):
            sim = s
            for j in range(chunk):
                out[e, j] = scripted_expert(sim)
                sim = step(sim, out[e, j])
        return out

    return policy


def random_policy(chunk: int = 8) -> ChunkPolicy:
    def policy(inp: PolicyInput) -> np.ndarray:
        r = np.random.default_rng(inp.seed)
        return r.uniform(-1, 1, size=(inp.images.shape[0], chunk, 3)).astype(np.float32)

    return policy

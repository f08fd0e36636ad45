"""Kinematic task families with hidden goals and dense/sparse rewards.

Families
--------
point_nav     2-D point mass, action = velocity. Observation: position.
wheeled_nav   differential drive, action = (left, right) wheel speed.
              Observation: position, cos/sin heading.
block_push    kinematic hand with a grab signal and three blocks; only one
              block (not observed as such) matters. Observation: hand,
              all blocks, goal.
legged_nav    point mass with the legged reward offset (+4).
latent_bandit one-step task, reward ``-||a - c||^2``; used as an analytic
              test bed for the latent machinery.

Navigation goals are never part of the observation. All geometry (arena,
goal regions, horizons, speed limits) is chosen for desk-scale runs.

Environments are vectorized: an :class:`EnvState` holds a batch of episodes,
each row with its own task.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import stream

DT = 0.1
A_MAX = 1.0
TRACK_WIDTH = 0.5
GRAB_RADIUS = 0.2
ARENA = 5.0  # positions are clipped to [-ARENA, ARENA]^2
C_MAX = 100.0
GOAL_RADII = (1.5, 2.5)
NUM_BLOCKS = 3
BLOCK_REGION = ((-1.0, 1.0), (0.6, 1.0))  # (x range, y range)
BLOCK_GOAL_REGION = ((-1.0, 1.0), (1.6, 2.0))
MIN_BLOCK_SEPARATION = 0.5
MANIFEST_FORMAT = "maesn-tasks"


@dataclass(frozen=True)
class RewardSpec:
    c_max: float = C_MAX
    sparse_threshold: float = 0.8
    dense_offset: float = 0.0
    squared: bool = False  # bandit uses squared distance


@dataclass(frozen=True)
class Family:
    name: str
    obs_dim: int
    action_dim: int
    horizon: int
    reward: RewardSpec


FAMILIES = {
    "point_nav": Family("point_nav", 2, 2, 50, RewardSpec(sparse_threshold=0.8)),
    "wheeled_nav": Family("wheeled_nav", 4, 2, 50, RewardSpec(sparse_threshold=0.8)),
    "block_push": Family("block_push", 2 + 2 * NUM_BLOCKS + 2, 3, 60, RewardSpec(sparse_threshold=0.2)),
    "legged_nav": Family("legged_nav", 2, 2, 50, RewardSpec(sparse_threshold=0.8, dense_offset=4.0)),
    "latent_bandit": Family("latent_bandit", 1, 2, 1, RewardSpec(sparse_threshold=0.8, squared=True)),
}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown task family {name!r}; choose from {sorted(FAMILIES)}") from None


@dataclass(frozen=True)
class TaskSpec:
    family: str
    goal: tuple[float, float]
    reward_mode: str = "dense"
    horizon: int = 50
    task_id: str = ""
    relevant_block: int | None = None
    blocks: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.reward_mode not in ("dense", "sparse"):
            raise ValueError(f"reward_mode must be 'dense' or 'sparse', got {self.reward_mode!r}")
        if self.family == "block_push":
            if self.blocks is None or self.relevant_block is None:
                raise ValueError("block_push tasks need blocks and relevant_block")
            if not 0 <= self.relevant_block < len(self.blocks):
                raise ValueError(f"relevant_block {self.relevant_block} out of range")

    def with_mode(self, mode: str) -> "TaskSpec":
        return replace(self, reward_mode=mode)

    def to_dict(self) -> dict:
        d = {"family": self.family, "goal": list(self.goal), "reward_mode": self.reward_mode,
             "horizon": self.horizon, "task_id": self.task_id}
        if self.family == "block_push":
            d["relevant_block"] = self.relevant_block
            d["blocks"] = [list(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        blocks = d.get("blocks")
        return cls(family=d["family"], goal=tuple(float(x) for x in d["goal"]),
                   reward_mode=d.get("reward_mode", "dense"), horizon=int(d["horizon"]),
                   task_id=d.get("task_id", ""), relevant_block=d.get("relevant_block"),
                   blocks=None if blocks is None else tuple(tuple(float(x) for x in b) for b in blocks))


@dataclass
class TaskBatch:
    """Per-row task arrays for a vectorized batch of episodes."""

    family: Family
    mode: str
    goal: np.ndarray  # (B, 2)
    relevant: np.ndarray  # (B,) int
    blocks0: np.ndarray | None  # (B, K, 2)
    horizon: int

    @classmethod
    def from_tasks(cls, tasks: Sequence[TaskSpec]) -> "TaskBatch":
        tasks = list(tasks)
        fams = {t.family for t in tasks}
        modes = {t.reward_mode for t in tasks}
        horizons = {t.horizon for t in tasks}
        if len(fams) != 1 or len(modes) != 1 or len(horizons) != 1:
            raise ValueError("a batch must share family, reward mode, and horizon")
        fam = get_family(fams.pop())
        goal = np.array([t.goal for t in tasks], dtype=np.float64)
        rel = np.array([t.relevant_block or 0 for t in tasks], dtype=np.int64)
        blocks = None
        if fam.name == "block_push":
            blocks = np.array([t.blocks for t in tasks], dtype=np.float64)
        return cls(fam, modes.pop(), goal, rel, blocks, horizons.pop())

    def __len__(self):
        return len(self.goal)


def as_batch(tasks) -> TaskBatch:
    if isinstance(tasks, TaskBatch):
        return tasks
    if isinstance(tasks, TaskSpec):
        return TaskBatch.from_tasks([tasks])
    return TaskBatch.from_tasks(tasks)


@dataclass
class EnvState:
    pos: np.ndarray  # (B, 2): body position, or hand position for block_push
    heading: np.ndarray  # (B,)
    blocks: np.ndarray | None  # (B, K, 2)
    t: int = 0
    last_action: np.ndarray | None = field(default=None, repr=False)


# ----------------------------------------------------------------------------
# task sampling


def _goal_on_half_annulus(rng) -> tuple[float, float]:
    r = rng.uniform(*GOAL_RADII)
    ang = rng.uniform(0.0, math.pi)
    return (r * math.cos(ang), r * math.sin(ang))


def _uniform_in(rng, region) -> tuple[float, float]:
    (x0, x1), (y0, y1) = region
    return (rng.uniform(x0, x1), rng.uniform(y0, y1))


def _sample_blocks(rng) -> tuple[tuple[float, float], ...]:
    while True:
        blocks = [_uniform_in(rng, BLOCK_REGION) for _ in range(NUM_BLOCKS)]
        ok = all(math.dist(blocks[i], blocks[j]) >= MIN_BLOCK_SEPARATION
                 for i in range(NUM_BLOCKS) for j in range(i + 1, NUM_BLOCKS))
        if ok:
            return tuple(blocks)


def sample_tasks(family: str, n: int, split: str = "train", seed: int = 0,
                 reward_mode: str = "dense", horizon: int | None = None) -> list[TaskSpec]:
    """Draw ``n`` distinct tasks; each split has its own random stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if split not in ("train", "validation"):
        raise ValueError(f"split must be 'train' or 'validation', got {split!r}")
    fam = get_family(family)
    rng = stream(seed, f"tasks/{family}/{split}")
    horizon = fam.horizon if horizon is None else horizon
    tasks: list[TaskSpec] = []
    goals: list[tuple[float, float]] = []
    while len(tasks) < n:
        blocks = rel = None
        if family == "block_push":
            blocks = _sample_blocks(rng)
            rel = int(rng.integers(NUM_BLOCKS))
            goal = _uniform_in(rng, BLOCK_GOAL_REGION)
        elif family == "latent_bandit":
            goal = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0))
        else:
            goal = _goal_on_half_annulus(rng)
        if any(math.dist(goal, g) < 1e-6 for g in goals):
            continue
        goals.append(goal)
        tasks.append(TaskSpec(family, goal, reward_mode, horizon, f"{family}-{split}-{len(tasks)}",
                              relevant_block=rel, blocks=blocks))
    return tasks


def make_tasks(family: str, goals, reward_mode: str = "dense", horizon: int | None = None,
               prefix: str = "task") -> list[TaskSpec]:
    """Tasks with explicit goals (navigation / bandit families)."""
    fam = get_family(family)
    horizon = fam.horizon if horizon is None else horizon
    return [TaskSpec(family, tuple(float(x) for x in g), reward_mode, horizon, f"{prefix}-{i}")
            for i, g in enumerate(goals)]


def save_manifest(path, tasks: Sequence[TaskSpec], seed: int | None = None, split: str | None = None):
    doc = {"format": MANIFEST_FORMAT, "version": 1, "seed": seed, "split": split,
           "family": tasks[0].family if tasks else None,
           "tasks": [t.to_dict() for t in tasks]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_manifest(path) -> list[TaskSpec]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a task manifest")
    return [TaskSpec.from_dict(d) for d in doc["tasks"]]


# ----------------------------------------------------------------------------
# dynamics


def reset(tasks) -> EnvState:
    tb = as_batch(tasks)
    b = len(tb)
    blocks = None if tb.blocks0 is None else tb.blocks0.copy()
    return EnvState(np.zeros((b, 2)), np.zeros(b), blocks, 0)


def observe(state: EnvState, tasks) -> np.ndarray:
    tb = as_batch(tasks)
    name = tb.family.name
    if name in ("point_nav", "legged_nav"):
        return state.pos.copy()
    if name == "wheeled_nav":
        return np.column_stack([state.pos, np.cos(state.heading), np.sin(state.heading)])
    if name == "block_push":
        b = len(state.pos)
        return np.concatenate([state.pos, state.blocks.reshape(b, -1), tb.goal], axis=1)
    return np.zeros((len(state.pos), 1))


def step(state: EnvState, action, tasks, spec: RewardSpec | None = None):
    """Advance every row one step. Returns ``(state, reward, done)``."""
    tb = as_batch(tasks)
    fam = tb.family
    action = np.asarray(action, dtype=np.float64)
    if action.ndim == 1:
        action = action[None, :]
    if action.shape != (len(state.pos), fam.action_dim):
        raise ValueError(f"{fam.name}: action shape {action.shape}, expected "
                         f"({len(state.pos)}, {fam.action_dim})")
    if not np.all(np.isfinite(action)):
        raise ValueError(f"{fam.name}: non-finite action")

    pos, heading, blocks = state.pos, state.heading, state.blocks
    if fam.name in ("point_nav", "legged_nav"):
        pos = np.clip(pos + np.clip(action, -A_MAX, A_MAX) * DT, -ARENA, ARENA)
    elif fam.name == "wheeled_nav":
        u = np.clip(action, -A_MAX, A_MAX)
        v = 0.5 * (u[:, 0] + u[:, 1])
        omega = (u[:, 1] - u[:, 0]) / TRACK_WIDTH
        step_xy = np.column_stack([np.cos(heading), np.sin(heading)]) * (v * DT)[:, None]
        pos = np.clip(pos + step_xy, -ARENA, ARENA)
        heading = heading + omega * DT
    elif fam.name == "block_push":
        new_hand = np.clip(pos + np.clip(action[:, :2], -A_MAX, A_MAX) * DT, -ARENA, ARENA)
        moved = new_hand - pos
        blocks = blocks.copy()
        d = np.linalg.norm(blocks - pos[:, None, :], axis=-1)
        nearest = np.argmin(d, axis=1)
        rows = np.arange(len(pos))
        held = (action[:, 2] > 0) & (d[rows, nearest] <= GRAB_RADIUS)
        blocks[rows[held], nearest[held]] += moved[held]
        pos = new_hand
    new = EnvState(pos, heading, blocks, state.t + 1, action)
    r = reward(new, tb, spec)
    done = np.full(len(pos), new.t >= tb.horizon)
    return new, r, done


def tracked_point(state: EnvState, tasks) -> np.ndarray:
    """The position the reward measures: relevant block, action (bandit), or body."""
    tb = as_batch(tasks)
    if tb.family.name == "block_push":
        return state.blocks[np.arange(len(state.pos)), tb.relevant]
    if tb.family.name == "latent_bandit":
        return state.last_action
    return state.pos


def reward(state: EnvState, tasks, spec: RewardSpec | None = None) -> np.ndarray:
    """Dense: ``-d + offset``. Sparse: ``-c_max + offset`` beyond the threshold,
    else the dense value."""
    tb = as_batch(tasks)
    spec = tb.family.reward if spec is None else spec
    d = np.linalg.norm(tracked_point(state, tb) - tb.goal, axis=-1)
    return shaped_reward(d, tb.mode, spec)


def shaped_reward(distance, mode: str, spec: RewardSpec) -> np.ndarray:
    d = np.asarray(distance, dtype=np.float64)
    dense = -(d * d if spec.squared else d)
    if mode == "dense":
        return dense + spec.dense_offset
    if mode == "sparse":
        return np.where(d <= spec.sparse_threshold, dense, -spec.c_max) + spec.dense_offset
    raise ValueError(f"unknown reward mode {mode!r}")


def max_dense_magnitude(family: str) -> float:
    """Largest |dense reward| reachable inside the arena."""
    fam = get_family(family)
    if fam.name == "latent_bandit":
        return math.inf
    (gx0, gx1), (gy0, gy1) = BLOCK_GOAL_REGION
    block_goal = math.hypot(max(abs(gx0), abs(gx1)), max(abs(gy0), abs(gy1)))
    return math.hypot(ARENA, ARENA) + max(GOAL_RADII[1], block_goal) + abs(fam.reward.dense_offset)

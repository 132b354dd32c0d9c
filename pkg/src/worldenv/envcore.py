"""Toy pick-and-place world used for demonstrations, exploration and evaluation.

All state lives in plain numpy arrays so that every function works on a single
episode or on a batch with a leading episode axis.

Proprioceptive layout (7): ``x`` (3, metres), ``q`` (3, axis-angle radians),
``p`` (1, gripper openness in [0, 1]).

Observation layout (17): gripper pose (7), object position (3),
object minus gripper (3), goal minus object (3), held flag (1).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from . import rotations
from .errors import ConfigurationError, EnvironmentAccessError

PROPRIO_DIM = 7
ACTION_DIM = 7
OBS_DIM = 17

WORKSPACE_LOW = -1.0
WORKSPACE_HIGH = 1.0
POS_DELTA_MAX = 0.1
ROT_DELTA_MAX = 0.2
GRASP_RADIUS = 0.05
SUCCESS_RADIUS = 0.05
GRIPPER_THRESHOLD = 0.5

ACTION_LOW = np.array([-POS_DELTA_MAX] * 3 + [-ROT_DELTA_MAX] * 3 + [0.0])
ACTION_HIGH = np.array([POS_DELTA_MAX] * 3 + [ROT_DELTA_MAX] * 3 + [1.0])

HOME_PROPRIO = np.array([0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0])

# observation slices
OBS_GRIPPER = slice(0, 7)
OBS_OBJECT = slice(7, 10)
OBS_OBJ_REL = slice(10, 13)
OBS_GOAL_REL = slice(13, 16)
OBS_HELD = 16


@dataclass(frozen=True)
class TaskSpec:
    name: str
    object_low: tuple[float, float, float]
    object_high: tuple[float, float, float]
    goal_low: tuple[float, float, float]
    goal_high: tuple[float, float, float]
    # what the scripted demonstrator does once the object sits at the goal
    post_success: str = "hold"


# start boxes: object on the left of the table, target on the right
_OBJ_LOW, _OBJ_HIGH = (-0.525, -0.15, 0.0), (-0.375, 0.15, 0.0)
_GOAL_XY_LOW, _GOAL_XY_HIGH = (0.375, -0.15), (0.525, 0.15)

TASKS: dict[int, TaskSpec] = {
    0: TaskSpec("pick_place", _OBJ_LOW, _OBJ_HIGH, (*_GOAL_XY_LOW, 0.0), (*_GOAL_XY_HIGH, 0.0)),
    1: TaskSpec("pick_place_shelf", _OBJ_LOW, _OBJ_HIGH, (*_GOAL_XY_LOW, 0.3), (*_GOAL_XY_HIGH, 0.3)),
    # redundant post-placement routine (re-grip and lift) for the termination study
    2: TaskSpec(
        "place_then_lift", _OBJ_LOW, _OBJ_HIGH, (*_GOAL_XY_LOW, 0.0), (*_GOAL_XY_HIGH, 0.0), post_success="lift"
    ),
}
N_TASKS = len(TASKS)
GOAL_ENC_DIM = N_TASKS + 3

LIFT_HEIGHT = 0.15


def check_task(task_id: int) -> TaskSpec:
    try:
        return TASKS[int(task_id)]
    except (KeyError, ValueError, TypeError):
        raise ConfigurationError(f"unknown task_id {task_id!r}; registered: {sorted(TASKS)}") from None


@dataclass(frozen=True)
class GoalSpec:
    """Structured instruction: task id plus target object position.

    Fields may be scalars/3-vectors (one episode) or carry a leading batch axis.
    """

    task_id: np.ndarray
    goal_pose: np.ndarray

    @property
    def encoding(self) -> np.ndarray:
        tid = np.asarray(self.task_id, dtype=np.int64)
        onehot = np.zeros(tid.shape + (N_TASKS,))
        np.put_along_axis(onehot, tid[..., None], 1.0, axis=-1)
        return np.concatenate([onehot, np.asarray(self.goal_pose, dtype=np.float64)], axis=-1)

    def __getitem__(self, idx) -> "GoalSpec":
        return GoalSpec(np.asarray(self.task_id)[idx], np.asarray(self.goal_pose)[idx])

    @staticmethod
    def stack(goals: Sequence["GoalSpec"]) -> "GoalSpec":
        return GoalSpec(
            np.array([int(g.task_id) for g in goals], dtype=np.int64),
            np.stack([np.asarray(g.goal_pose, dtype=np.float64) for g in goals]),
        )


@dataclass(frozen=True)
class EnvState:
    proprio: np.ndarray
    object_pose: np.ndarray
    held: np.ndarray
    step_count: np.ndarray = field(default_factory=lambda: np.array(0))

    def __getitem__(self, idx) -> "EnvState":
        return EnvState(self.proprio[idx], self.object_pose[idx], self.held[idx], np.asarray(self.step_count)[idx])

    @staticmethod
    def stack(states: Sequence["EnvState"]) -> "EnvState":
        return EnvState(
            np.stack([s.proprio for s in states]),
            np.stack([s.object_pose for s in states]),
            np.stack([np.asarray(s.held) for s in states]),
            np.stack([np.asarray(s.step_count) for s in states]),
        )


# --- true-environment access accounting -------------------------------------

class AccessGuard:
    """Counts true-environment calls made while it is active."""

    def __init__(self, forbid: bool = True):
        self.forbid = forbid
        self.calls = 0


_active_guards: list[AccessGuard] = []


@contextlib.contextmanager
def access_guard(forbid: bool = True) -> Iterator[AccessGuard]:
    """While active, calls to ``reset``/``step_true`` are counted (and raise if ``forbid``)."""
    guard = AccessGuard(forbid)
    _active_guards.append(guard)
    try:
        yield guard
    finally:
        _active_guards.remove(guard)


def _record_access(name: str) -> None:
    for guard in _active_guards:
        guard.calls += 1
        if guard.forbid:
            raise EnvironmentAccessError(f"true environment call {name!r} inside a guarded region")


# --- dynamics ---------------------------------------------------------------

def clip_action(a: np.ndarray) -> np.ndarray:
    return np.clip(a, ACTION_LOW, ACTION_HIGH)


def fk(s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Apply an end-effector delta action to a proprioceptive state."""
    s = np.asarray(s, dtype=np.float64)
    a = clip_action(np.asarray(a, dtype=np.float64))
    x = np.clip(s[..., 0:3] + a[..., 0:3], WORKSPACE_LOW, WORKSPACE_HIGH)
    q = rotations.compose(a[..., 3:6], s[..., 3:6])
    p = np.clip(a[..., 6:7], 0.0, 1.0)
    return np.concatenate([x, q, p], axis=-1)


def observe(state: EnvState, goal: GoalSpec) -> np.ndarray:
    x = state.proprio[..., 0:3]
    obj = state.object_pose
    goal_pose = np.asarray(goal.goal_pose, dtype=np.float64)
    held = np.asarray(state.held, dtype=np.float64)[..., None]
    return np.concatenate([state.proprio, obj, obj - x, goal_pose - obj, held], axis=-1)


def reset(task_id: int, seed: int) -> tuple[EnvState, np.ndarray, GoalSpec]:
    """Deterministic episode start for ``(task_id, seed)``."""
    _record_access("reset")
    return _reset(task_id, seed)


def _reset(task_id: int, seed: int) -> tuple[EnvState, np.ndarray, GoalSpec]:
    task = check_task(task_id)
    rng = np.random.default_rng([int(task_id), int(seed)])
    obj = rng.uniform(task.object_low, task.object_high)
    goal_pose = rng.uniform(task.goal_low, task.goal_high)
    state = EnvState(HOME_PROPRIO.copy(), obj, np.array(False), np.array(0))
    goal = GoalSpec(np.array(int(task_id)), goal_pose)
    return state, observe(state, goal), goal


def reset_batch(task_ids: Sequence[int], seeds: Sequence[int]) -> tuple[EnvState, np.ndarray, GoalSpec]:
    _record_access("reset")
    parts = [_reset(t, s) for t, s in zip(task_ids, seeds)]
    states = EnvState.stack([p[0] for p in parts])
    goals = GoalSpec.stack([p[2] for p in parts])
    return states, observe(states, goals), goals


def oracle_success(state: EnvState, goal: GoalSpec) -> np.ndarray:
    dist = np.linalg.norm(state.object_pose - np.asarray(goal.goal_pose), axis=-1)
    return (dist < SUCCESS_RADIUS) & ~np.asarray(state.held, dtype=bool)


def step_true(state: EnvState, a: np.ndarray, goal: GoalSpec) -> tuple[EnvState, np.ndarray, np.ndarray]:
    """Advance the ground-truth world by one action."""
    _record_access("step_true")
    s_next = fk(state.proprio, a)
    x_new = s_next[..., 0:3]
    p_old = state.proprio[..., 6]
    p_new = s_next[..., 6]
    held = np.asarray(state.held, dtype=bool)

    obj = np.where(held[..., None], x_new, state.object_pose)
    released = held & (p_new > GRIPPER_THRESHOLD)
    near = np.linalg.norm(x_new - obj, axis=-1) < GRASP_RADIUS
    grasped = ~held & (p_old >= GRIPPER_THRESHOLD) & (p_new < GRIPPER_THRESHOLD) & near
    obj = np.where(grasped[..., None], x_new, obj)
    held_new = (held & ~released) | grasped

    new_state = EnvState(s_next, obj, held_new, np.asarray(state.step_count) + 1)
    return new_state, observe(new_state, goal), oracle_success(new_state, goal)


# --- scripted demonstrator ----------------------------------------------------

EXPERT_GAIN = 0.5
EXPERT_SPEED = 0.03
# gripper ramps: closes as the object gets near, opens as the carried object nears the goal
CLOSE_RAMP = (0.01, 0.05)
RELEASE_RAMP = (0.04, 0.0)
DONE_DIST = 0.03
TWIST_ANGLE = 0.45


def _ramp(d: np.ndarray, lo_hi: tuple[float, float]) -> np.ndarray:
    lo, hi = lo_hi
    return np.clip((d - lo) / (hi - lo), 0.0, 1.0)


def scripted_expert(state: EnvState, goal: GoalSpec) -> np.ndarray:
    """Phase controller: approach, grip, carry, release, then the task's post-success routine.

    The "lift" routine twists the wrist first, so its states are distinguishable
    from the carry phase by proprioception alone.
    """
    x = state.proprio[..., 0:3]
    q = state.proprio[..., 3:6]
    obj = state.object_pose
    goal_pose = np.asarray(goal.goal_pose, dtype=np.float64)
    held = np.asarray(state.held, dtype=bool)
    lifts = np.vectorize(lambda t: TASKS[int(t)].post_success == "lift")(np.asarray(goal.task_id))

    d_obj = np.linalg.norm(obj - x, axis=-1)
    d_goal = np.linalg.norm(goal_pose - obj, axis=-1)
    done = ~held & (d_goal < DONE_DIST)
    twisted = q[..., 2] > TWIST_ANGLE
    routine = lifts & (done | held) & twisted
    twisting = lifts & done & ~twisted

    target = np.where(held[..., None], goal_pose, obj)
    target = np.where((held & twisted)[..., None], goal_pose + np.array([0.0, 0.0, LIFT_HEIGHT]), target)
    target = np.where(done[..., None], x, target)
    dx = np.clip(EXPERT_GAIN * (target - x), -EXPERT_SPEED, EXPERT_SPEED)

    dq = np.clip(-EXPERT_GAIN * q, -ROT_DELTA_MAX, ROT_DELTA_MAX)
    dq = np.where((routine | twisting)[..., None], 0.0, dq)
    dq[..., 2] = np.where(twisting, ROT_DELTA_MAX, dq[..., 2])

    grip = np.where(held, _ramp(d_goal, RELEASE_RAMP), _ramp(d_obj, CLOSE_RAMP))
    grip = np.where(done, 1.0, grip)
    grip = np.where(routine, 0.0, grip)
    return np.concatenate([dx, dq, grip[..., None]], axis=-1)


# --- episodes ------------------------------------------------------------------

PolicyFn = Callable[[EnvState, np.ndarray, GoalSpec], np.ndarray]


@dataclass
class Episode:
    """One true-environment episode: ``T`` actions and ``T + 1`` frames."""

    task_id: int
    seed: int
    goal: GoalSpec
    obs: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray
    success: np.ndarray
    provenance: str = "expert"

    @property
    def length(self) -> int:
        return len(self.actions)

    def labels(self) -> np.ndarray:
        """Per post-action frame: completed at or before that step."""
        return np.maximum.accumulate(self.success[1:].astype(np.int64))

    def first_success(self) -> int | None:
        """1-based action count at which the oracle first reports success."""
        hits = np.flatnonzero(self.success[1:])
        return int(hits[0]) + 1 if hits.size else None


def run_episodes(
    policy_fn: PolicyFn,
    task_ids: Sequence[int],
    seeds: Sequence[int],
    horizon: int,
    provenance: str = "expert",
) -> list[Episode]:
    """Run a batch of episodes in the true environment for exactly ``horizon`` steps."""
    state, obs, goals = reset_batch(task_ids, seeds)
    n = len(task_ids)
    obs_hist = [obs]
    prop_hist = [state.proprio]
    act_hist = []
    succ_hist = [np.zeros(n, dtype=bool)]
    for _ in range(horizon):
        a = clip_action(policy_fn(state, obs, goals))
        state, obs, success = step_true(state, a, goals)
        act_hist.append(a)
        obs_hist.append(obs)
        prop_hist.append(state.proprio)
        succ_hist.append(success)
    O = np.stack(obs_hist, axis=1)
    S = np.stack(prop_hist, axis=1)
    A = np.stack(act_hist, axis=1) if act_hist else np.zeros((n, 0, ACTION_DIM))
    Y = np.stack(succ_hist, axis=1)
    return [
        Episode(int(task_ids[i]), int(seeds[i]), goals[i], O[i], S[i], A[i], Y[i], provenance)
        for i in range(n)
    ]


def expert_policy(state: EnvState, obs: np.ndarray, goals: GoalSpec) -> np.ndarray:
    return scripted_expert(state, goals)


# per-dimension noise multipliers for demonstrations: rotation and gripper commands are looser
DEMO_NOISE_SHAPE = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 5.0])


def noisy_expert(noise: float, rng: np.random.Generator) -> PolicyFn:
    """Scripted expert with Gaussian action jitter, a stand-in for human demonstration variability."""
    sigma = noise * DEMO_NOISE_SHAPE

    def act(state: EnvState, obs: np.ndarray, goals: GoalSpec) -> np.ndarray:
        a = scripted_expert(state, goals)
        return clip_action(a + rng.normal(size=a.shape) * sigma)

    return act


def with_step(state: EnvState, step_count: int) -> EnvState:
    return replace(state, step_count=np.asarray(step_count))

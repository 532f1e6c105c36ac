"""Deterministic planar manipulation simulator with a scripted expert.

Workspace is the unit square. The gripper carries an aperture in [0, 1];
actions are (dx, dy, dgrip) deltas in [-1, 1] scaled by MAX_STEP. Closing the
aperture past 0.5 grabs the nearest object within GRASP_RADIUS; opening past
0.5 releases it. A held object moves rigidly with the gripper.

Two task kinds:
  pick_place — bring the single object into a fixed central goal region.
  stack      — place the top object (index 1) onto the bottom object (index 0)
               within STACK_TOL; the goal field mirrors the bottom object's
               reset position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core.rng import split_rng
from .core.types import Action, Observation, Trajectory, trajectory_id

MAX_STEP = 0.05
GRASP_RADIUS = 0.04
STACK_TOL = 0.03
CORNER_INSET = 0.1
T_MAX = 120
HOME = (0.5, 0.5)
PICK_GOAL = (0.5, 0.5, 0.1)
# minimum reset separation between a movable object and its destination,
# so that episodes never start already solved
MIN_START_SEPARATION = 0.02

CORNERS = (
    (CORNER_INSET, CORNER_INSET),
    (CORNER_INSET, 1.0 - CORNER_INSET),
    (1.0 - CORNER_INSET, CORNER_INSET),
    (1.0 - CORNER_INSET, 1.0 - CORNER_INSET),
)

TASK_IDS = {"pick_place": 0, "stack": 1}
TASK_NAMES = {v: k for k, v in TASK_IDS.items()}
INSTRUCTIONS = {
    "pick_place": "pick up the block and place it inside the goal region",
    "stack": "stack the top block onto the base block",
}


class EpisodeDone(RuntimeError):
    """step() was called on a finished episode."""


class ExpertFailure(RuntimeError):
    """The scripted expert did not reach the goal (mis-specified geometry)."""


@dataclass(frozen=True)
class TaskSpec:
    task_kind: str  # "pick_place" | "stack"
    task_id: int
    instruction: str
    object_count: int
    placement: str  # "corners" | "uniform"
    t_max: int = T_MAX

    def __post_init__(self):
        if self.task_kind not in TASK_IDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if self.placement not in ("corners", "uniform"):
            raise ValueError(f"unknown placement {self.placement!r}")


def task_spec(task_kind: str, placement: str = "uniform", t_max: int = T_MAX) -> TaskSpec:
    return TaskSpec(
        task_kind=task_kind,
        task_id=TASK_IDS[task_kind],
        instruction=INSTRUCTIONS[task_kind],
        object_count=2 if task_kind == "stack" else 1,
        placement=placement,
        t_max=t_max,
    )


@dataclass
class WorldState:
    gripper: np.ndarray  # (3,) x, y, aperture
    objects: np.ndarray  # (n, 2)
    held: np.ndarray  # (n,) bool
    goal: tuple[float, float, float]
    task_kind: str
    task_id: int
    step: int
    t_max: int
    done: bool = False

    def copy(self) -> "WorldState":
        return WorldState(
            gripper=self.gripper.copy(),
            objects=self.objects.copy(),
            held=self.held.copy(),
            goal=self.goal,
            task_kind=self.task_kind,
            task_id=self.task_id,
            step=self.step,
            t_max=self.t_max,
            done=self.done,
        )


def observe(state: WorldState) -> Observation:
    return Observation(
        proprio=(float(state.gripper[0]), float(state.gripper[1]), float(state.gripper[2])),
        objects=tuple(
            (float(x), float(y), bool(h)) for (x, y), h in zip(state.objects, state.held)
        ),
        goal=state.goal,
        task_id=state.task_id,
        step_index=state.step,
    )


def reset(spec: TaskSpec, seed: int) -> tuple[WorldState, Observation]:
    """Deterministic initial state for (spec, seed).

    Corner placement cycles through the four inset corners by seed; uniform
    placement draws from the seed's own stream, re-drawing until the movable
    object starts clear of its destination.
    """
    rng = split_rng(seed, "reset")
    if spec.task_kind == "pick_place":
        goal = PICK_GOAL
        if spec.placement == "corners":
            obj = np.array(CORNERS[seed % 4], dtype=np.float64)
        else:
            while True:
                obj = rng.uniform(CORNER_INSET, 1.0 - CORNER_INSET, size=2)
                if np.hypot(obj[0] - goal[0], obj[1] - goal[1]) > goal[2] + MIN_START_SEPARATION:
                    break
        objects = obj[None, :]
    else:  # stack
        bottom = rng.uniform(0.35, 0.65, size=2)
        if spec.placement == "corners":
            top = np.array(CORNERS[seed % 4], dtype=np.float64)
        else:
            while True:
                top = rng.uniform(CORNER_INSET, 1.0 - CORNER_INSET, size=2)
                if np.hypot(top[0] - bottom[0], top[1] - bottom[1]) > STACK_TOL + MIN_START_SEPARATION:
                    break
        goal = (float(bottom[0]), float(bottom[1]), STACK_TOL)
        objects = np.stack([bottom, top])
    state = WorldState(
        gripper=np.array([HOME[0], HOME[1], 1.0], dtype=np.float64),
        objects=objects.astype(np.float64),
        held=np.zeros(len(objects), dtype=bool),
        goal=goal,
        task_kind=spec.task_kind,
        task_id=spec.task_id,
        step=0,
        t_max=spec.t_max,
    )
    return state, observe(state)


def oracle_success(state: WorldState) -> bool:
    """Pure predicate: the movable object rests (not held) at its destination."""
    if state.task_kind == "pick_place":
        if state.held[0]:
            return False
        gx, gy, r = state.goal
        return bool(np.hypot(state.objects[0, 0] - gx, state.objects[0, 1] - gy) <= r)
    top, bottom = state.objects[1], state.objects[0]
    if state.held[1]:
        return False
    return bool(np.hypot(top[0] - bottom[0], top[1] - bottom[1]) <= STACK_TOL)


def step(state: WorldState, action: Action) -> tuple[WorldState, Observation, bool]:
    if state.done:
        raise EpisodeDone("step after episode end")
    s = state.copy()
    delta = action.as_array()
    prev_ap = float(s.gripper[2])
    s.gripper[0] = min(1.0, max(0.0, s.gripper[0] + MAX_STEP * delta[0]))
    s.gripper[1] = min(1.0, max(0.0, s.gripper[1] + MAX_STEP * delta[1]))
    s.gripper[2] = min(1.0, max(0.0, prev_ap + MAX_STEP * delta[2]))
    new_ap = float(s.gripper[2])

    holding = bool(s.held.any())
    if not holding and prev_ap > 0.5 and new_ap <= 0.5:
        dists = np.hypot(s.objects[:, 0] - s.gripper[0], s.objects[:, 1] - s.gripper[1])
        nearest = int(np.argmin(dists))
        if dists[nearest] <= GRASP_RADIUS:
            s.held[nearest] = True
    elif holding and prev_ap <= 0.5 and new_ap > 0.5:
        s.held[:] = False

    if s.held.any():
        idx = int(np.argmax(s.held))
        s.objects[idx, 0] = s.gripper[0]
        s.objects[idx, 1] = s.gripper[1]

    s.step += 1
    success = oracle_success(s)
    s.done = success or s.step >= s.t_max
    return s, observe(s), s.done


def _toward(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Raw (unscaled) delta toward dst: full speed when far, decelerating on
    approach so the final steps are small (and easy to imitate precisely)."""
    diff = dst - src
    dist = float(np.hypot(diff[0], diff[1]))
    if dist < 1e-12:
        return np.zeros(2)
    speed = min(1.0, max(0.35, dist / 0.12))
    step_len = min(dist, MAX_STEP * speed)
    return (diff / dist) * (step_len / MAX_STEP)


APERTURE_READY = 0.65  # pre-closed level held during the approach
APERTURE_CLOSED = 0.35  # fully closed level held during transport


def expert_action(state: WorldState) -> np.ndarray:
    """Closed-loop waypoint controller: approach (pre-closing the gripper to
    just above the grasp threshold), grasp, pause, transport, release.

    The aperture doubles as a phase clock: it ramps monotonically within each
    phase, so every intermediate state determines its action."""
    movable = 1 if state.task_kind == "stack" else 0
    gxy = state.gripper[:2]
    ap = float(state.gripper[2])
    if state.held[movable]:
        dest = state.objects[0, :2] if state.task_kind == "stack" else np.array(state.goal[:2])
        if np.hypot(*(dest - gxy)) <= 1e-9:
            return np.array([0.0, 0.0, 1.0])  # open to release
        if ap > APERTURE_CLOSED + 1e-9:
            # settle right after the grasp: finish closing before moving off
            return np.array([0.0, 0.0, -1.0])
        return np.array([*_toward(gxy, dest), 0.0])
    obj = state.objects[movable, :2]
    d = obj - gxy
    if np.hypot(*d) > 1e-9:
        dg = np.clip((APERTURE_READY - ap) / MAX_STEP, -1.0, 1.0)
        return np.array([*_toward(gxy, obj), dg])
    return np.array([0.0, 0.0, -1.0])  # at the object: close through the threshold


def scripted_expert(
    spec: TaskSpec,
    seed: int,
    traj_id: str | None = None,
    iteration: int = 0,
) -> Trajectory:
    """Run the expert controller to produce one oracle-successful demonstration."""
    state, obs = reset(spec, seed)
    frames: list[tuple[Observation, Action]] = []
    done = False
    while not done:
        act = Action.clipped(expert_action(state))
        state, next_obs, done = step(state, act)
        frames.append((obs, act))
        obs = next_obs
    if not oracle_success(state):
        raise ExpertFailure(f"expert failed on {spec.task_kind} seed {seed}")
    return Trajectory(
        id=traj_id or trajectory_id(seed, "expert", seed, spec.task_id),
        task_id=spec.task_id,
        instruction=spec.instruction,
        frames=frames,
        terminal=obs,
        oracle_success=True,
        verdict=None,
        iteration=iteration,
        rng_seed=seed,
        policy_tag="expert",
    )


def replay_episode(spec: TaskSpec, traj: Trajectory) -> bool:
    """Open-loop replay of stored actions from the recorded reset seed."""
    if traj.rng_seed is None:
        raise ValueError("trajectory has no reset seed")
    state, _obs = reset(spec, traj.rng_seed)
    for _obs_t, act in traj.frames:
        if state.done:
            break
        state, _, _ = step(state, act)
    return oracle_success(state)


def state_from_observation(obs: Observation, t_max: int = T_MAX) -> WorldState:
    """Rebuild a WorldState from an observation (the observation is complete)."""
    return WorldState(
        gripper=np.array(obs.proprio, dtype=np.float64),
        objects=np.array([[x, y] for x, y, _h in obs.objects], dtype=np.float64),
        held=np.array([h for _x, _y, h in obs.objects], dtype=bool),
        goal=obs.goal,
        task_kind=TASK_NAMES[obs.task_id],
        task_id=obs.task_id,
        step=obs.step_index,
        t_max=t_max,
    )


def spec_for_trajectory(traj: Trajectory, t_max: int = T_MAX) -> TaskSpec:
    """Reconstruct the reset distribution from provenance: experts start at
    corners, learned policies at uniform placements."""
    kind = TASK_NAMES[traj.task_id]
    placement = "corners" if traj.policy_tag == "expert" else "uniform"
    return task_spec(kind, placement=placement, t_max=t_max)

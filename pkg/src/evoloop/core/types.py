"""Domain types shared by every stage of the data engine."""

from __future__ import annotations

import math
import uuid
from dataclasses import dataclass, asdict

import numpy as np

SCHEMA_VERSION = 1

_ID_NAMESPACE = uuid.UUID("b6a4e1d2-6c3f-4f7e-9a15-2d8f0c4e7a91")


def trajectory_id(rng_seed: int, iteration: int | str, index: int | str, task_id: int = 0) -> str:
    """Content-independent, deterministic trajectory id."""
    return str(uuid.uuid5(_ID_NAMESPACE, f"{rng_seed}:{iteration}:{task_id}:{index}"))


class ValidationError(ValueError):
    """A domain object violates one of its invariants."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


@dataclass(frozen=True)
class Observation:
    proprio: tuple[float, float, float]  # gripper x, y, aperture
    objects: tuple[tuple[float, float, bool], ...]  # per object: x, y, held
    goal: tuple[float, float, float]  # center x, y, radius
    task_id: int
    step_index: int

    def __post_init__(self):
        x, y, ap = self.proprio
        _check(0.0 <= x <= 1.0 and 0.0 <= y <= 1.0, "gripper outside workspace")
        _check(0.0 <= ap <= 1.0, "aperture outside [0, 1]")
        for ox, oy, _held in self.objects:
            _check(0.0 <= ox <= 1.0 and 0.0 <= oy <= 1.0, "object outside workspace")
        _check(self.step_index >= 0, "negative step index")

    def to_dict(self) -> dict:
        return {
            "proprio": list(self.proprio),
            "objects": [[ox, oy, bool(h)] for ox, oy, h in self.objects],
            "goal": list(self.goal),
            "task_id": self.task_id,
            "step_index": self.step_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        return cls(
            proprio=tuple(d["proprio"]),
            objects=tuple((o[0], o[1], bool(o[2])) for o in d["objects"]),
            goal=tuple(d["goal"]),
            task_id=int(d["task_id"]),
            step_index=int(d["step_index"]),
        )


ACTION_DIM = 3  # dx, dy, grip command


@dataclass(frozen=True)
class Action:
    delta: tuple[float, float, float]  # each in [-1, 1], scaled by the env's max step size

    def __post_init__(self):
        _check(len(self.delta) == ACTION_DIM, "action dimension mismatch")
        for c in self.delta:
            _check(math.isfinite(c), "non-finite action component")
            _check(abs(c) <= 1.0, "action component outside [-1, 1]")

    @classmethod
    def clipped(cls, raw) -> "Action":
        """Build an action from an unbounded vector by clipping to [-1, 1]."""
        arr = np.asarray(raw, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("non-finite action component")
        arr = np.clip(arr, -1.0, 1.0)
        return cls(delta=(float(arr[0]), float(arr[1]), float(arr[2])))

    def as_array(self) -> np.ndarray:
        return np.array(self.delta, dtype=np.float64)


@dataclass(frozen=True)
class ActionChunk:
    actions: np.ndarray  # (K, ACTION_DIM)
    predicted_at: int

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=np.float64)
        _check(a.ndim == 2 and a.shape[1] == ACTION_DIM, "chunk must be K x action_dim")
        _check(bool(np.all(np.isfinite(a))), "non-finite chunk entries")
        object.__setattr__(self, "actions", a)

    @property
    def size(self) -> int:
        return self.actions.shape[0]


@dataclass(frozen=True)
class Verdict:
    score: float | None  # in [0, 10] when present; None on backend/parse failure
    success: bool
    backend: str  # "oracle" | "remote"
    raw_response: str
    latency_ms: float = 0.0
    clamped: bool = False
    parse_error: str | None = None

    def __post_init__(self):
        if self.score is not None:
            _check(0.0 <= self.score <= 10.0, "score outside [0, 10]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        return cls(
            score=d["score"],
            success=bool(d["success"]),
            backend=d["backend"],
            raw_response=d["raw_response"],
            latency_ms=float(d.get("latency_ms", 0.0)),
            clamped=bool(d.get("clamped", False)),
            parse_error=d.get("parse_error"),
        )


@dataclass
class Trajectory:
    id: str
    task_id: int
    instruction: str
    frames: list[tuple[Observation, Action]]
    terminal: Observation
    oracle_success: bool
    verdict: Verdict | None
    iteration: int
    rng_seed: int
    policy_tag: str

    def __post_init__(self):
        _check(len(self.frames) > 0, "trajectory has no frames")
        prev = -1
        for obs, _act in self.frames:
            _check(obs.step_index > prev, "step indices must strictly increase")
            prev = obs.step_index

    def __len__(self) -> int:
        return len(self.frames)

    def actions_array(self) -> np.ndarray:
        """Executed actions as a (T, ACTION_DIM) array."""
        return np.array([act.delta for _obs, act in self.frames], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "task_id": self.task_id,
            "instruction": self.instruction,
            "frames": [
                {"obs": obs.to_dict(), "action": list(act.delta)} for obs, act in self.frames
            ],
            "terminal": self.terminal.to_dict(),
            "oracle_success": self.oracle_success,
            "verdict": self.verdict.to_dict() if self.verdict is not None else None,
            "iteration": self.iteration,
            "rng_seed": self.rng_seed,
            "policy_tag": self.policy_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported trajectory schema: {d.get('schema_version')}")
        return cls(
            id=d["id"],
            task_id=int(d["task_id"]),
            instruction=d["instruction"],
            frames=[
                (Observation.from_dict(f["obs"]), Action(delta=tuple(f["action"])))
                for f in d["frames"]
            ],
            terminal=Observation.from_dict(d["terminal"]),
            oracle_success=bool(d["oracle_success"]),
            verdict=Verdict.from_dict(d["verdict"]) if d.get("verdict") else None,
            iteration=int(d["iteration"]),
            rng_seed=int(d["rng_seed"]),
            policy_tag=d["policy_tag"],
        )


@dataclass
class EngineConfig:
    """All loop hyperparameters. Geometry constants live in envsim."""

    chunk_size: int = 30  # K
    ensemble_lambda: float = 0.1
    gamma: float = 7.0
    n_env: int = 8
    n_rollout: int = 256
    iterations: int = 8
    t_max: int = 120
    rng_seed: int = 0
    eval_episodes: int = 200
    flow_steps: int = 10
    hidden_dim: int = 64
    decoder_blocks: int = 2
    expert_blocks: int = 2
    mlp_ratio: int = 2
    max_objects: int = 2
    n_tasks: int = 2
    collector_lr: float = 1e-3
    collector_steps: int = 1500
    collector_batch: int = 32
    target_lr: float = 1e-3
    target_steps: int = 2500
    target_batch: int = 32
    weight_decay: float = 1e-4
    gate_mode: str = "score"  # "score" | "success_only" | "none"
    warm_start_collector: bool = False
    disable_ensembling: bool = False

    def validate(self) -> None:
        _check(self.chunk_size >= 1, "chunk_size must be >= 1")
        _check(self.n_env >= 1, "n_env must be >= 1")
        _check(self.n_rollout >= self.n_env, "n_rollout must be >= n_env")
        _check(0.0 <= self.gamma <= 10.0, "gamma must lie in [0, 10]")
        _check(self.ensemble_lambda >= 0.0, "ensemble decay must be >= 0")
        _check(self.iterations >= 0, "iterations must be >= 0")
        _check(self.t_max >= 1, "t_max must be >= 1")
        _check(self.flow_steps >= 1, "flow_steps must be >= 1")
        _check(self.gate_mode in ("score", "success_only", "none"), "unknown gate_mode")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

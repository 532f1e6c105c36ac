"""Trajectory verifier: score rollouts against a reference demonstration and
gate admission at a threshold.

Two backends share the Verdict contract:
  oracle — deterministic local scorer for CI: failures score 0; successes
           start at 5 and earn up to 2.5 points each for finishing quickly
           and for low jerk relative to the reference.
  remote — HTTP endpoint receiving a JSON prompt and answering with free text
           containing one `SCORE: <number>` line.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field

import requests

from .core.types import Trajectory, Verdict
from .metrics import mean_abs_jerk, trajectory_series

SCORE_PATTERN = re.compile(r"^\s*SCORE:\s*(-?\d+(?:\.\d+)?)\s*$", re.MULTILINE)
SUCCESS_PATTERN = re.compile(r"^\s*SUCCESS:\s*(true|false)\s*$", re.MULTILINE | re.IGNORECASE)


class VerifierError(RuntimeError):
    pass


@dataclass
class GateConfig:
    gamma: float = 7.0
    backend: str = "oracle"  # "oracle" | "remote"
    endpoint: str = ""
    auth_token: str = ""
    timeout_s: float = 30.0
    max_retries: int = 3
    backoff_s: float = 0.5
    reference_ids: dict[int, str] = field(default_factory=dict)  # task_id -> trajectory id

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 10.0:
            raise ValueError("gamma must lie in [0, 10]")
        if self.backend not in ("oracle", "remote"):
            raise ValueError(f"unknown backend {self.backend!r}")


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def _traj_jerk(traj: Trajectory) -> float:
    series = trajectory_series(traj)
    if series.steps < 4:
        return 0.0
    return mean_abs_jerk(series)


def score_oracle(tau: Trajectory, ref: Trajectory, instruction: str | None = None) -> Verdict:
    """Deterministic quality score in [0, 10].

    Failures score 0. Successes score 5 + 2.5 * time_score + 2.5 * smooth_score
    where time_score = clamp(2 - len(tau)/len(ref), 0, 1) and smooth_score =
    clamp(2 - jerk(tau)/max(jerk(ref), 1e-9), 0, 1).
    """
    t0 = time.perf_counter()
    if not ref.oracle_success:
        raise VerifierError("reference trajectory must be oracle-successful")
    if tau.task_id != ref.task_id:
        raise VerifierError(f"task mismatch: {tau.task_id} vs {ref.task_id}")
    if not tau.oracle_success:
        score = 0.0
        detail = "failure"
    else:
        time_score = _clamp01(2.0 - len(tau) / len(ref))
        smooth_score = _clamp01(2.0 - _traj_jerk(tau) / max(_traj_jerk(ref), 1e-9))
        score = 5.0 + 2.5 * time_score + 2.5 * smooth_score
        detail = f"time_score={time_score:.6f} smooth_score={smooth_score:.6f}"
    return Verdict(
        score=score,
        success=score > 0.0,
        backend="oracle",
        raw_response=detail,
        latency_ms=(time.perf_counter() - t0) * 1e3,
    )


def _frame_vector(obs) -> list[float]:
    vec = list(obs.proprio)
    for x, y, held in obs.objects:
        vec.extend((x, y, 1.0 if held else 0.0))
    vec.extend(obs.goal)
    return vec


def request_payload(tau: Trajectory, ref: Trajectory, instruction: str) -> dict:
    """Wire format of the remote scoring request."""
    return {
        "instruction": instruction,
        "task_id": tau.task_id,
        "rollout_frames": [_frame_vector(obs) for obs, _act in tau.frames],
        "reference_frames": [_frame_vector(obs) for obs, _act in ref.frames],
    }


def parse_score(text: str) -> tuple[float, bool]:
    """Extract the first `SCORE: <number>` line; returns (score, clamped)."""
    m = SCORE_PATTERN.search(text)
    if m is None:
        raise VerifierError("no SCORE line in response")
    raw = float(m.group(1))
    clamped = raw < 0.0 or raw > 10.0
    return min(10.0, max(0.0, raw)), clamped


def score_remote(
    tau: Trajectory,
    ref: Trajectory,
    instruction: str,
    gate_cfg: GateConfig,
    session: requests.Session | None = None,
) -> Verdict:
    """Score via the remote endpoint with bounded retries.

    Network failure after the retry budget, or an unparseable response, yields
    an error verdict (score=None) which is never admitted.
    """
    t0 = time.perf_counter()
    sess = session or requests
    headers = {"Content-Type": "application/json"}
    if gate_cfg.auth_token:
        headers["Authorization"] = f"Bearer {gate_cfg.auth_token}"
    payload = request_payload(tau, ref, instruction)
    text = None
    last_error = None
    for attempt in range(gate_cfg.max_retries + 1):
        try:
            resp = sess.post(
                gate_cfg.endpoint,
                data=json.dumps(payload),
                headers=headers,
                timeout=gate_cfg.timeout_s,
            )
            resp.raise_for_status()
            text = resp.text
            break
        except requests.RequestException as exc:
            last_error = exc
            if attempt < gate_cfg.max_retries:
                time.sleep(gate_cfg.backoff_s * (2**attempt))
    latency_ms = (time.perf_counter() - t0) * 1e3
    if text is None:
        return Verdict(
            score=None,
            success=False,
            backend="remote",
            raw_response="",
            latency_ms=latency_ms,
            parse_error=f"network_error: {last_error}",
        )
    try:
        score, clamped = parse_score(text)
    except VerifierError as exc:
        return Verdict(
            score=None,
            success=False,
            backend="remote",
            raw_response=text,
            latency_ms=latency_ms,
            parse_error=str(exc),
        )
    m = SUCCESS_PATTERN.search(text)
    success = m.group(1).lower() == "true" if m else score > 0.0
    return Verdict(
        score=score,
        success=success,
        backend="remote",
        raw_response=text,
        latency_ms=latency_ms,
        clamped=clamped,
    )


def gate(verdict: Verdict, gamma: float) -> bool:
    """Admit exactly when the score is present and >= gamma."""
    if verdict.score is None:
        raise VerifierError("verdict has no score")
    return verdict.score >= gamma


def admits(verdict: Verdict, gamma: float, mode: str = "score") -> bool:
    """Gate after applying the configured ablation mode.

    score        — admit iff score >= gamma (scoreless verdicts rejected);
    success_only — admit every success regardless of score;
    none         — admit everything (no filtering).
    """
    if mode == "none":
        return True
    if mode == "success_only":
        return verdict.success
    if verdict.score is None:
        return False
    return gate(verdict, gamma)

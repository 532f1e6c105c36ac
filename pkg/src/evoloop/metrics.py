"""Trajectory-quality metrics: total variation, mean absolute jerk, and the
high-frequency share of spectral power, plus open-loop replay checks.

Conventions (documented, since they affect absolute values):
  - the power spectrum is the one-sided transform of the raw, unwindowed
    channel, scaled so the non-DC bins sum to the channel's centered energy
    (Parseval);
  - the cutoff bin is ceil(f_max / 2) with f_max the Nyquist bin floor(T/2);
  - a constant channel contributes 0 to the high-frequency ratio.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .core.store import DatasetManifest
from .core.types import Trajectory
from .envsim import MAX_STEP, TaskSpec, replay_episode, spec_for_trajectory

REPORT_COLUMNS = ("corpus", "count", "tv_mean", "jerk_mean", "hf_ratio_mean", "replay_rate")


@dataclass(frozen=True)
class JointSeries:
    values: np.ndarray  # (T, N) actuator positions over time
    sample_period: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("joint series must be T x N")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite joint series")
        object.__setattr__(self, "values", v)

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def trajectory_series(traj: Trajectory) -> JointSeries:
    """Executed pose series: cumulative sum of the scaled executed actions."""
    return JointSeries(values=np.cumsum(MAX_STEP * traj.actions_array(), axis=0))


def total_variation(series: JointSeries) -> float:
    """Per-channel sum of absolute first differences, averaged over channels."""
    if series.steps < 2:
        raise ValueError("total variation needs at least 2 samples")
    return float(np.abs(np.diff(series.values, axis=0)).sum() / series.channels)


def mean_abs_jerk(series: JointSeries) -> float:
    """Mean absolute discrete third difference a(t) - 3a(t-1) + 3a(t-2) - a(t-3)."""
    t, n = series.steps, series.channels
    if t < 4:
        raise ValueError("jerk needs at least 4 samples")
    v = series.values
    d3 = v[3:] - 3.0 * v[2:-1] + 3.0 * v[1:-2] - v[:-3]
    return float(np.abs(d3).sum() / ((t - 3) * n))


def power_spectrum(channel: np.ndarray) -> np.ndarray:
    """One-sided power per bin 0..floor(T/2); non-DC bins sum to centered energy."""
    x = np.asarray(channel, dtype=np.float64)
    t = x.shape[0]
    spec = np.fft.rfft(x)
    p = (spec.real**2 + spec.imag**2) / t
    p[1:] *= 2.0
    if t % 2 == 0:
        p[-1] /= 2.0  # the Nyquist bin is not mirrored
    return p


def spectrum_bins(t: int) -> tuple[int, int, int]:
    """(first non-DC bin, cutoff bin, Nyquist bin) for a length-t signal."""
    f_max = t // 2
    f_cutoff = math.ceil(f_max / 2)
    return 1, f_cutoff, f_max


def hf_ratio(series: JointSeries) -> float:
    """Share of non-DC spectral power at or above the cutoff bin, averaged over
    channels; constant channels contribute 0."""
    t = series.steps
    if t < 4:
        raise ValueError("hf ratio needs at least 4 samples")
    f1, f_cut, f_max = spectrum_bins(t)
    total = 0.0
    for j in range(series.channels):
        p = power_spectrum(series.values[:, j])
        denom = p[f1 : f_max + 1].sum()
        if denom <= 0.0:
            continue
        total += p[f_cut : f_max + 1].sum() / denom
    return float(total / series.channels)


def replay_success_rate(
    manifest: DatasetManifest,
    spec_for: Callable[[Trajectory], TaskSpec] = spec_for_trajectory,
) -> float:
    """Fraction of trajectories whose open-loop replay reaches oracle success."""
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    ok = 0
    for entry in manifest:
        traj = entry.load()
        if replay_episode(spec_for(traj), traj):
            ok += 1
    return ok / len(manifest)


def corpus_metrics(
    manifest: DatasetManifest,
    spec_for: Callable[[Trajectory], TaskSpec] = spec_for_trajectory,
) -> dict:
    """Mean TV / jerk / HF ratio plus the replay rate for one corpus."""
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    tvs, jerks, hfs = [], [], []
    replays = 0
    for entry in manifest:
        traj = entry.load()
        series = trajectory_series(traj)
        tvs.append(total_variation(series))
        if series.steps >= 4:
            jerks.append(mean_abs_jerk(series))
            hfs.append(hf_ratio(series))
        if replay_episode(spec_for(traj), traj):
            replays += 1
    return {
        "count": len(manifest),
        "tv_mean": float(np.mean(tvs)),
        "jerk_mean": float(np.mean(jerks)) if jerks else 0.0,
        "hf_ratio_mean": float(np.mean(hfs)) if hfs else 0.0,
        "replay_rate": replays / len(manifest),
    }


def corpus_report(
    manifests: dict[str, DatasetManifest],
    spec_for: Callable[[Trajectory], TaskSpec] = spec_for_trajectory,
) -> list[dict]:
    rows = []
    for name, manifest in manifests.items():
        row = {"corpus": name}
        row.update(corpus_metrics(manifest, spec_for))
        rows.append(row)
    return rows


def write_corpus_csv(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in REPORT_COLUMNS})

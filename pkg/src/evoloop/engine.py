"""The bootstrapping loop: train collector on the current dataset, roll out in
parallel environments, verify and gate, grow the dataset, retrain the target
from scratch, and record the scaling curve.

Run directory layout:

    config.json                     effective run configuration
    seeds/                          seed demonstration store
    iterations/<i>/raw/             rollout store for loop iteration i
    iterations/<i>/silver/manifest.jsonl   admitted subset (view onto raw)
    iterations/<i>/stage.json       per-stage progress (resumable)
    checkpoints/                    collector_i*.npz / target_v*.npz
    scaling.csv                     iteration,dataset_size,admit_rate,collector_sr,target_sr,seconds
    evaluations.csv                 iteration,task,episodes,successes,rate

scaling.csv row 0 is the seed-only baseline; row k (k >= 1) reports the
iteration that produced dataset version k and the target trained on it.
"""

from __future__ import annotations

import csv
import json
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import collector as collector_mod
from . import target as target_mod
from .autodiff import ParamSet, load_params, save_params
from .core.rng import derive_seed
from .core.store import DatasetManifest, DatasetStore, StoreError, make_manifest
from .core.types import EngineConfig, Trajectory, ValidationError, trajectory_id
from .envsim import scripted_expert, task_spec
from .verifier import GateConfig, VerifierError, admits, score_oracle, score_remote

SCALING_COLUMNS = ("iteration", "dataset_size", "admit_rate", "collector_sr", "target_sr", "seconds")
EVAL_COLUMNS = ("iteration", "task", "episodes", "successes", "rate")
SEEDS_PER_TASK = 4


class BackendUnavailable(RuntimeError):
    """The verifier backend could not be reached; the iteration aborts but the
    run directory stays resumable."""


class MissingPrerequisite(RuntimeError):
    """A pipeline stage was invoked before the stage it depends on."""


@dataclass
class RunConfig:
    """Everything a run needs beyond the loop hyperparameters."""

    engine: EngineConfig = field(default_factory=EngineConfig)
    tasks: list[str] = field(default_factory=lambda: ["pick_place"])
    backend: str = "oracle"
    endpoint: str = ""
    auth_token: str = ""
    timeout_s: float = 30.0
    max_retries: int = 3
    backoff_s: float = 0.5

    def validate(self) -> None:
        self.engine.validate()
        if not self.tasks:
            raise ValidationError("no tasks configured")
        for name in self.tasks:
            task_spec(name)  # raises on unknown task
        if self.backend not in ("oracle", "remote"):
            raise ValidationError(f"unknown backend {self.backend!r}")
        if self.backend == "remote" and not self.endpoint:
            raise ValidationError("remote backend requires an endpoint")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["engine"] = self.engine.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        engine = EngineConfig.from_dict(d.pop("engine", {}))
        cfg = cls(engine=engine, **d)
        cfg.validate()
        return cfg


@dataclass
class IterationRecord:
    index: int  # dataset version produced; 0 is the seed-only baseline
    dataset_size: int
    attempted: int
    admitted: int
    admit_rate: float
    collector_sr: float
    target_sr: float
    seconds: float

    def __post_init__(self):
        if self.admitted > self.attempted:
            raise ValidationError("admitted exceeds attempted")


class EngineRun:
    """Handle on a run directory; owns paths and persisted progress."""

    def __init__(self, run_dir: str | Path, config: RunConfig):
        self.dir = Path(run_dir)
        self.config = config
        self.cfg = config.engine

    # -- construction ------------------------------------------------------

    @classmethod
    def create(cls, run_dir: str | Path, config: RunConfig) -> "EngineRun":
        config.validate()
        run = cls(run_dir, config)
        run.dir.mkdir(parents=True, exist_ok=True)
        with open(run.config_path, "w", encoding="utf-8") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        return run

    @classmethod
    def open(cls, run_dir: str | Path) -> "EngineRun":
        run_dir = Path(run_dir)
        config_path = run_dir / "config.json"
        if not config_path.exists():
            raise MissingPrerequisite(f"no config.json under {run_dir}")
        with open(config_path, "r", encoding="utf-8") as fh:
            config = RunConfig.from_dict(json.load(fh))
        return cls(run_dir, config)

    # -- paths ---------------------------------------------------------------

    @property
    def config_path(self) -> Path:
        return self.dir / "config.json"

    @property
    def seeds_dir(self) -> Path:
        return self.dir / "seeds"

    @property
    def checkpoints_dir(self) -> Path:
        return self.dir / "checkpoints"

    @property
    def scaling_path(self) -> Path:
        return self.dir / "scaling.csv"

    @property
    def evaluations_path(self) -> Path:
        return self.dir / "evaluations.csv"

    def iteration_dir(self, i: int) -> Path:
        return self.dir / "iterations" / str(i)

    def raw_dir(self, i: int) -> Path:
        return self.iteration_dir(i) / "raw"

    def silver_manifest_path(self, i: int) -> Path:
        return self.iteration_dir(i) / "silver" / "manifest.jsonl"

    def stage_path(self, i: int) -> Path:
        return self.iteration_dir(i) / "stage.json"

    def collector_ckpt(self, i: int) -> Path:
        return self.checkpoints_dir / f"collector_i{i}.npz"

    def target_ckpt(self, version: int) -> Path:
        return self.checkpoints_dir / f"target_v{version}.npz"

    # -- stage bookkeeping ---------------------------------------------------

    def read_stage(self, i: int) -> dict:
        path = self.stage_path(i)
        if not path.exists():
            return {}
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def update_stage(self, i: int, **values) -> dict:
        state = self.read_stage(i)
        state.update(values)
        path = self.stage_path(i)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(state, fh, indent=2, sort_keys=True)
        return state

    # -- csv ------------------------------------------------------------------

    def scaling_rows(self) -> list[dict]:
        if not self.scaling_path.exists():
            return []
        with open(self.scaling_path, "r", newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))

    def append_scaling_row(self, record: IterationRecord) -> None:
        exists = self.scaling_path.exists()
        with open(self.scaling_path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if not exists:
                writer.writerow(SCALING_COLUMNS)
            writer.writerow(
                [
                    record.index,
                    record.dataset_size,
                    record.admit_rate,
                    record.collector_sr,
                    record.target_sr,
                    record.seconds,
                ]
            )

    def append_eval_rows(self, rows: list[dict]) -> None:
        exists = self.evaluations_path.exists()
        with open(self.evaluations_path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
            if not exists:
                writer.writeheader()
            for row in rows:
                writer.writerow(row)

    def completed_versions(self) -> set[int]:
        return {int(row["iteration"]) for row in self.scaling_rows()}


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def generate_seeds(run: EngineRun, exist_ok: bool = True, force: bool = False) -> DatasetStore:
    """Four corner demonstrations per configured task.

    An existing seed store is reused when exist_ok, rebuilt when force, and a
    refusal otherwise (the CLI's safety behavior).
    """
    if (run.seeds_dir / "manifest.jsonl").exists():
        if force:
            shutil.rmtree(run.seeds_dir)
        elif exist_ok:
            return DatasetStore(run.seeds_dir, mode="read")
        else:
            raise StoreError(f"seed store already exists at {run.seeds_dir}")
    store = DatasetStore(run.seeds_dir, mode="create")
    for name in run.config.tasks:
        spec = task_spec(name, placement="corners", t_max=run.cfg.t_max)
        for corner in range(SEEDS_PER_TASK):
            traj = scripted_expert(
                spec,
                corner,
                traj_id=trajectory_id(run.cfg.rng_seed, "seed", corner, spec.task_id),
            )
            store.append(traj, views=("seed",))
    return store


def seed_manifest(run: EngineRun) -> DatasetManifest:
    if not (run.seeds_dir / "manifest.jsonl").exists():
        raise MissingPrerequisite("seed store missing; run the seed stage first")
    return make_manifest(DatasetStore(run.seeds_dir, mode="read"), view="seed", name="seeds")


def silver_manifest(run: EngineRun, i: int) -> DatasetManifest:
    path = run.silver_manifest_path(i)
    if not path.exists():
        raise MissingPrerequisite(f"no silver manifest for iteration {i}")
    return DatasetManifest.load_file(path, name=f"silver_{i}", view="silver")


def training_manifest(run: EngineRun, version: int) -> DatasetManifest:
    """Dataset version `version`: seeds plus every admitted set before it."""
    manifest = seed_manifest(run)
    for j in range(version):
        manifest = manifest.union(silver_manifest(run, j), name=f"dataset_v{j + 1}")
    return manifest


def gate_config(run: EngineRun) -> GateConfig:
    rc = run.config
    return GateConfig(
        gamma=run.cfg.gamma,
        backend=rc.backend,
        endpoint=rc.endpoint,
        auth_token=rc.auth_token,
        timeout_s=rc.timeout_s,
        max_retries=rc.max_retries,
        backoff_s=rc.backoff_s,
    )


def reference_trajectories(run: EngineRun) -> dict[int, Trajectory]:
    """Per task: the first corner seed demonstration."""
    refs: dict[int, Trajectory] = {}
    for entry in seed_manifest(run):
        if entry.task_id not in refs:
            refs[entry.task_id] = entry.load()
    return refs


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def train_collector_stage(run: EngineRun, i: int) -> ParamSet:
    cfg = run.cfg
    t0 = time.perf_counter()
    manifest = training_manifest(run, i)
    seed = derive_seed(cfg.rng_seed, f"collector:i{i}")
    if cfg.warm_start_collector and i > 0 and run.collector_ckpt(i - 1).exists():
        params = load_params(run.collector_ckpt(i - 1))
    else:
        params = collector_mod.init_collector_params(cfg, seed)
    params, _losses = collector_mod.train_bc(params, manifest, cfg, seed)
    run.checkpoints_dir.mkdir(parents=True, exist_ok=True)
    save_params(params, run.collector_ckpt(i))
    run.update_stage(i, collector_seconds=time.perf_counter() - t0, collector_trained=True)
    return params


def rollout_stage(run: EngineRun, i: int, params: ParamSet | None = None) -> DatasetStore:
    """N_rollout episodes per task with uniform resets, fanned out over n_env
    workers. Seeds and ids depend only on the rollout index, so results are
    identical for any worker count."""
    cfg = run.cfg
    if params is None:
        if not run.collector_ckpt(i).exists():
            raise MissingPrerequisite(f"collector checkpoint for iteration {i} missing")
        params = load_params(run.collector_ckpt(i))
    t0 = time.perf_counter()
    jobs = []
    for name in run.config.tasks:
        spec = task_spec(name, placement="uniform", t_max=cfg.t_max)
        for j in range(cfg.n_rollout):
            seed = derive_seed(cfg.rng_seed, f"rollout:i{i}:t{spec.task_id}:j{j}")
            tid = trajectory_id(cfg.rng_seed, i, j, spec.task_id)
            jobs.append((spec, seed, tid))

    def one(job):
        spec, seed, tid = job
        return collector_mod.rollout(
            params, spec, seed, cfg, traj_id=tid, iteration=i, policy_tag="collector"
        )

    if cfg.n_env == 1:
        results = [one(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=cfg.n_env) as pool:
            results = list(pool.map(one, jobs))

    store = DatasetStore(run.raw_dir(i), mode="create")
    successes = 0
    for traj in results:  # append in rollout-index order regardless of completion order
        store.append(traj, views=("raw",))
        successes += int(traj.oracle_success)
    run.update_stage(
        i,
        rollout_seconds=time.perf_counter() - t0,
        attempted=len(results),
        collector_sr=successes / len(results),
    )
    return store


def verify_stage(run: EngineRun, i: int) -> DatasetManifest:
    """Score every raw rollout, gate, tag admissions, save the silver manifest."""
    cfg = run.cfg
    if not (run.raw_dir(i) / "manifest.jsonl").exists():
        raise MissingPrerequisite(f"no raw rollouts for iteration {i}")
    t0 = time.perf_counter()
    store = DatasetStore(run.raw_dir(i), mode="read")
    refs = reference_trajectories(run)
    gcfg = gate_config(run)
    admitted = 0
    for entry in store.entries():
        traj = entry.load()
        ref = refs.get(traj.task_id)
        if ref is None:
            raise VerifierError(f"no reference demonstration for task {traj.task_id}")
        if gcfg.backend == "oracle":
            verdict = score_oracle(traj, ref, traj.instruction)
        else:
            verdict = score_remote(traj, ref, traj.instruction, gcfg)
            if verdict.parse_error and verdict.parse_error.startswith("network_error"):
                raise BackendUnavailable(verdict.parse_error)
        admit = admits(verdict, cfg.gamma, mode=cfg.gate_mode)
        store.attach_verdict(traj.id, verdict, extra_views=("silver",) if admit else ())
        admitted += int(admit)
    silver = make_manifest(store, view="silver", name=f"silver_{i}")
    silver.save(run.silver_manifest_path(i))
    run.update_stage(
        i,
        verify_seconds=time.perf_counter() - t0,
        admitted=admitted,
        zero_admissions=admitted == 0,
    )
    return silver


def _evaluate_target(run: EngineRun, params: ParamSet, version: int) -> float:
    cfg = run.cfg
    policy = target_mod.TargetPolicy(params, cfg)
    rows = []
    rates = []
    for name in run.config.tasks:
        spec = task_spec(name, placement="uniform", t_max=cfg.t_max)
        base = derive_seed(cfg.rng_seed, f"eval:t{spec.task_id}")
        rate = target_mod.evaluate(policy, spec, cfg.eval_episodes, base, cfg)
        rows.append(
            {
                "iteration": version,
                "task": name,
                "episodes": cfg.eval_episodes,
                "successes": round(rate * cfg.eval_episodes),
                "rate": rate,
            }
        )
        rates.append(rate)
    run.append_eval_rows(rows)
    return sum(rates) / len(rates)


def train_target_stage(run: EngineRun, i: int) -> IterationRecord:
    """Train the target from scratch on dataset version i+1 and complete the row."""
    cfg = run.cfg
    stage = run.read_stage(i)
    for needed in ("collector_sr", "admitted"):
        if needed not in stage:
            raise MissingPrerequisite(f"iteration {i} stages incomplete (missing {needed})")
    t0 = time.perf_counter()
    version = i + 1
    manifest = training_manifest(run, version)
    seed = derive_seed(cfg.rng_seed, f"target:v{version}")
    params = target_mod.init_target_params(cfg, seed)
    params, _losses = target_mod.train_target(params, manifest, cfg, seed)
    run.checkpoints_dir.mkdir(parents=True, exist_ok=True)
    save_params(params, run.target_ckpt(version))
    target_sr = _evaluate_target(run, params, version)
    seconds = (
        stage.get("collector_seconds", 0.0)
        + stage.get("rollout_seconds", 0.0)
        + stage.get("verify_seconds", 0.0)
        + (time.perf_counter() - t0)
    )
    record = IterationRecord(
        index=version,
        dataset_size=len(manifest),
        attempted=stage["attempted"],
        admitted=stage["admitted"],
        admit_rate=stage["admitted"] / stage["attempted"],
        collector_sr=stage["collector_sr"],
        target_sr=target_sr,
        seconds=seconds,
    )
    run.update_stage(i, target_seconds=time.perf_counter() - t0, complete=True)
    run.append_scaling_row(record)
    return record


def seed_baseline(run: EngineRun) -> IterationRecord:
    """Target trained on the seed demonstrations alone; anchor of the curve."""
    cfg = run.cfg
    t0 = time.perf_counter()
    manifest = seed_manifest(run)
    seed = derive_seed(cfg.rng_seed, "target:v0")
    params = target_mod.init_target_params(cfg, seed)
    params, _losses = target_mod.train_target(params, manifest, cfg, seed)
    run.checkpoints_dir.mkdir(parents=True, exist_ok=True)
    save_params(params, run.target_ckpt(0))
    target_sr = _evaluate_target(run, params, 0)
    record = IterationRecord(
        index=0,
        dataset_size=len(manifest),
        attempted=0,
        admitted=0,
        admit_rate=0.0,
        collector_sr=0.0,
        target_sr=target_sr,
        seconds=time.perf_counter() - t0,
    )
    run.append_scaling_row(record)
    return record


def run_iteration(run: EngineRun, i: int) -> IterationRecord:
    params = train_collector_stage(run, i)
    rollout_stage(run, i, params)
    verify_stage(run, i)
    return train_target_stage(run, i)


def run_engine(run: EngineRun) -> list[IterationRecord]:
    """Execute the configured number of iterations, resuming past completed
    dataset versions recorded in scaling.csv."""
    cfg = run.cfg
    cfg.validate()
    generate_seeds(run)
    done = run.completed_versions()
    records: list[IterationRecord] = []
    if 0 not in done:
        records.append(seed_baseline(run))
    for i in range(cfg.iterations):
        if (i + 1) in done:
            continue
        records.append(run_iteration(run, i))
    return records


def records_from_csv(run: EngineRun) -> list[IterationRecord]:
    rows = []
    for row in run.scaling_rows():
        stage = run.read_stage(int(row["iteration"]) - 1) if int(row["iteration"]) > 0 else {}
        rows.append(
            IterationRecord(
                index=int(row["iteration"]),
                dataset_size=int(row["dataset_size"]),
                attempted=stage.get("attempted", 0),
                admitted=stage.get("admitted", 0),
                admit_rate=float(row["admit_rate"]),
                collector_sr=float(row["collector_sr"]),
                target_sr=float(row["target_sr"]),
                seconds=float(row["seconds"]),
            )
        )
    return rows


def relative_improvement(baseline: float, final: float) -> float:
    """(final - baseline) / baseline; infinite when the baseline is zero."""
    if baseline == 0.0:
        return float("inf") if final > 0.0 else 0.0
    return (final - baseline) / baseline

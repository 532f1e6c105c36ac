"""Command-line surface for the pipeline.

Commands map to pipeline stages; `iterate` runs the full loop. Every command
is idempotent or refuses without side effects. Exit codes: 0 success,
2 config error, 3 missing prerequisite, 4 verifier backend failure,
1 other refusal or failure. Failures print a JSON error object to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .autodiff import load_params
from .core.store import DatasetManifest, DatasetStore, StoreError, make_manifest
from .core.types import ValidationError
from .core.rng import derive_seed
from .engine import (
    BackendUnavailable,
    EngineRun,
    MissingPrerequisite,
    RunConfig,
    generate_seeds,
    records_from_csv,
    rollout_stage,
    run_engine,
    seed_baseline,
    train_collector_stage,
    train_target_stage,
    verify_stage,
)
from .envsim import ExpertFailure, task_spec
from .metrics import corpus_report, write_corpus_csv
from .target import TargetPolicy, evaluate
from .verifier import VerifierError

ENDPOINT_ENV = "EVOLOOP_VERIFIER_URL"
TOKEN_ENV = "EVOLOOP_VERIFIER_TOKEN"


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _load_config(args) -> RunConfig:
    run_config_path = Path(args.out) / "config.json" if getattr(args, "out", None) else None
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            config = RunConfig.from_dict(json.load(fh))
    elif run_config_path and run_config_path.exists():
        with open(run_config_path, "r", encoding="utf-8") as fh:
            config = RunConfig.from_dict(json.load(fh))
    else:
        config = RunConfig()
    if getattr(args, "seed", None) is not None:
        config.engine.rng_seed = args.seed
    if getattr(args, "iterations", None) is not None:
        config.engine.iterations = args.iterations
    if getattr(args, "gamma", None) is not None:
        config.engine.gamma = args.gamma
    if getattr(args, "backend", None) is not None:
        config.backend = args.backend
    if getattr(args, "keep_all_successes", False):
        config.engine.gate_mode = "success_only"
    if os.environ.get(ENDPOINT_ENV):
        config.endpoint = os.environ[ENDPOINT_ENV]
    if os.environ.get(TOKEN_ENV):
        config.auth_token = os.environ[TOKEN_ENV]
    config.validate()
    return config


def _open_or_create_run(args) -> EngineRun:
    config = _load_config(args)
    return EngineRun.create(args.out, config)


def _open_run(args) -> EngineRun:
    return EngineRun.open(args.out)


def cmd_seed(args) -> int:
    if args.print_defaults:
        print(json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True))
        return 0
    if not args.out:
        raise ValidationError("--out is required")
    run = _open_or_create_run(args)
    store = generate_seeds(run, exist_ok=False, force=args.force)
    print(f"seed store at {run.seeds_dir} with {len(store)} demonstrations")
    return 0


def cmd_iterate(args) -> int:
    run = _open_or_create_run(args)
    records = run_engine(run)
    for record in records:
        print(
            f"iteration {record.index}: dataset={record.dataset_size} "
            f"admit_rate={record.admit_rate:.3f} collector_sr={record.collector_sr:.3f} "
            f"target_sr={record.target_sr:.3f}"
        )
    print(f"scaling curve at {run.scaling_path}")
    return 0


def cmd_train_collector(args) -> int:
    run = _open_run(args)
    generate_seeds(run)
    train_collector_stage(run, args.iteration)
    print(f"collector checkpoint at {run.collector_ckpt(args.iteration)}")
    return 0


def cmd_rollout(args) -> int:
    run = _open_run(args)
    store = rollout_stage(run, args.iteration)
    stage = run.read_stage(args.iteration)
    print(f"{len(store)} rollouts, collector success rate {stage['collector_sr']:.3f}")
    return 0


def cmd_verify(args) -> int:
    run = _open_run(args)
    if run.silver_manifest_path(args.iteration).exists():
        raise StoreError(f"iteration {args.iteration} already verified")
    silver = verify_stage(run, args.iteration)
    stage = run.read_stage(args.iteration)
    print(f"admitted {stage['admitted']} of {stage['attempted']} rollouts")
    print(f"silver manifest at {run.silver_manifest_path(args.iteration)} ({len(silver)} entries)")
    return 0


def cmd_train_target(args) -> int:
    run = _open_run(args)
    version = args.iteration + 1 if args.iteration is not None else 0
    if version in run.completed_versions():
        raise StoreError(f"dataset version {version} already trained")
    if args.iteration is None:
        record = seed_baseline(run)
    else:
        record = train_target_stage(run, args.iteration)
    print(f"target v{record.index}: success rate {record.target_sr:.3f}")
    return 0


def cmd_eval(args) -> int:
    run = _open_run(args)
    ckpt = run.target_ckpt(args.version)
    if not ckpt.exists():
        raise MissingPrerequisite(f"no target checkpoint version {args.version}")
    cfg = run.cfg
    params = load_params(ckpt)
    policy = TargetPolicy(params, cfg)
    results = {}
    for name in run.config.tasks:
        spec = task_spec(name, placement="uniform", t_max=cfg.t_max)
        base = derive_seed(cfg.rng_seed, f"eval:t{spec.task_id}")
        results[name] = evaluate(policy, spec, cfg.eval_episodes, base, cfg)
    out_path = run.dir / "report" / f"eval_v{args.version}.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump({"version": args.version, "rates": results}, fh, indent=2, sort_keys=True)
    for name, rate in results.items():
        print(f"{name}: {rate:.3f}")
    return 0


def cmd_report(args) -> int:
    run = _open_run(args)
    rows = run.scaling_rows()
    if not rows:
        raise MissingPrerequisite("scaling.csv missing; run iterations first")
    report_dir = run.dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    gated_mode = run.cfg.gate_mode
    curve_path = report_dir / "scaling_curve.csv"
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("gated_mode,iteration,dataset_size,target_sr\n")
        for row in rows:
            fh.write(f"{gated_mode},{row['iteration']},{row['dataset_size']},{row['target_sr']}\n")

    corpora = {}
    corpora["seed"] = make_manifest(DatasetStore(run.seeds_dir, mode="read"), view="seed", name="seed")
    raw_entries = []
    silver_entries = []
    i = 0
    while (run.raw_dir(i) / "manifest.jsonl").exists():
        store = DatasetStore(run.raw_dir(i), mode="read")
        raw_entries.extend(make_manifest(store, view="raw").entries)
        silver_path = run.silver_manifest_path(i)
        if silver_path.exists():
            silver_entries.extend(DatasetManifest.load_file(silver_path).entries)
        i += 1
    if raw_entries:
        corpora["raw"] = DatasetManifest(name="raw", view="raw", entries=tuple(raw_entries))
    if silver_entries:
        corpora["silver"] = DatasetManifest(name="silver", view="silver", entries=tuple(silver_entries))
    quality_rows = corpus_report(corpora)
    write_corpus_csv(quality_rows, report_dir / "quality.csv")
    print(f"report under {report_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evoloop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        if needs_out:
            p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int, help="engine RNG seed override")
        p.add_argument("--gamma", type=float, help="gate threshold override")
        p.add_argument("--backend", choices=["oracle", "remote"], help="verifier backend")
        p.add_argument(
            "--keep-all-successes",
            action="store_true",
            help="gate on success only, ignoring the quality threshold",
        )

    p = sub.add_parser("seed", help="generate the corner seed demonstrations")
    p.add_argument("--out", help="run directory")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--backend", choices=["oracle", "remote"])
    p.add_argument("--keep-all-successes", action="store_true")
    p.add_argument("--force", action="store_true", help="rebuild an existing seed store")
    p.add_argument("--print-defaults", action="store_true", help="print the default config JSON")
    p.set_defaults(func=cmd_seed)

    p = sub.add_parser("iterate", help="run the full bootstrapping loop")
    common(p)
    p.add_argument("--iterations", type=int, help="iteration count override")
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("train-collector", help="train the collector for one iteration")
    p.add_argument("--out", required=True)
    p.add_argument("--iteration", type=int, required=True)
    p.set_defaults(func=cmd_train_collector)

    p = sub.add_parser("rollout", help="generate rollouts for one iteration")
    p.add_argument("--out", required=True)
    p.add_argument("--iteration", type=int, required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("verify", help="score and gate rollouts for one iteration")
    p.add_argument("--out", required=True)
    p.add_argument("--iteration", type=int, required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train-target", help="train and evaluate the target policy")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--iteration",
        type=int,
        default=None,
        help="loop iteration whose union dataset to train on (omit for the seed baseline)",
    )
    p.set_defaults(func=cmd_train_target)

    p = sub.add_parser("eval", help="evaluate a target checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--version", type=int, required=True, help="dataset version of the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="emit plot-ready scaling and quality tables")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        return _fail(2, "config_error", str(exc))
    except MissingPrerequisite as exc:
        return _fail(3, "missing_prerequisite", str(exc))
    except BackendUnavailable as exc:
        return _fail(4, "backend_unavailable", str(exc))
    except (StoreError, VerifierError, ExpertFailure) as exc:
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())

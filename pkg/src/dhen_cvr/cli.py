"""Command-line entry point: gen-data, train, eval, ablate and search.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
Set ``DHEN_CVR_LOG_LEVEL`` (e.g. DEBUG, WARNING) to change verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError
from .config import RunConfig, load_run_config
from .data import hash_partitions, partition_files, partition_filename, read_partition, write_partition
from .errors import ConfigError, DataError, DivergenceError

log = logging.getLogger("dhen_cvr")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _load_config(path: str) -> RunConfig:
    return load_run_config(path).validate()


def _load_data(data_dir: str):
    parts = [read_partition(p) for p in partition_files(data_dir)]
    return sorted(parts, key=lambda p: p.day)


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from .synthetic import generate_partitions

    run = _load_config(args.config)
    if args.days < 1:
        raise UsageError("--days must be >= 1")
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    parts = generate_partitions(run.world, range(args.days))
    for part in parts:
        write_partition(part, out / partition_filename(part.day, args.gzip))
        print(f"day {part.day}: {len(part)} records  hash {hash_partitions([part])}")
    print(f"data hash {hash_partitions(parts)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainState, load_checkpoint, save_checkpoint, train

    run = _load_config(args.config)
    parts = _load_data(args.data)
    state = load_checkpoint(args.warm_start, run) if args.warm_start else TrainState.fresh(run)
    trace_path = Path(args.trace) if args.trace else Path(str(args.out) + ".trace.jsonl")
    with trace_path.open("w", encoding="utf-8") as trace:
        def record(rec: dict) -> None:
            trace.write(json.dumps(rec, sort_keys=True) + "\n")
            log.info("%s", rec)

        evals = _load_data(args.eval_data) if args.eval_data else None
        train(state, parts, max_steps=args.max_steps, eval_partitions=evals, on_record=record)
    digest = save_checkpoint(state, args.out)
    print(f"trained {state.step} steps; checkpoint {args.out} sha256 {digest}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .training import load_model

    model = load_model(args.model)
    parts = _load_data(args.data)
    report = evaluate(model, parts)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.jsonl(), encoding="utf-8")
    out.with_suffix(".csv").write_text(report.csv(), encoding="utf-8")
    for r in report.records():
        print(f"{r['head']:<12} roc_auc {r['roc_auc']}  pr_auc {r['pr_auc']}  "
              f"({r['positives']}/{r['examples']} positive)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    run = _load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    arms = [a for a in args.arms.split(",") if a] if args.arms is not None else None
    if arms is not None and not arms:
        raise UsageError("--arms must name at least one arm")
    report = run_ablation(args.plan, run, seeds=seeds, jobs=args.jobs or run.eval.jobs, arms=arms)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    (out / "table.txt").write_text(report.table(), encoding="utf-8")
    (out / "report.csv").write_text(report.csv(), encoding="utf-8")
    (out / "records.jsonl").write_text(report.jsonl(), encoding="utf-8")
    (out / "data_hashes.json").write_text(json.dumps({str(k): v for k, v in report.data_hashes.items()},
                                                     indent=2) + "\n", encoding="utf-8")
    print(report.table(), end="")
    return EXIT_OK


def cmd_search(args) -> int:
    from .pareto import run_search

    run = _load_config(args.config)
    if run.search.n_train < 1:
        raise UsageError("search budget must allow at least one candidate")
    result = run_search(run, jobs=args.jobs or run.eval.jobs)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    (out / "candidates.jsonl").write_text(result.candidate_log(), encoding="utf-8")
    (out / "surrogate.json").write_text(json.dumps(result.surrogate.summary(), indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    (out / "front.csv").write_text(result.front_csv(), encoding="utf-8")
    (out / "plot_data.csv").write_text(result.plot_data(), encoding="utf-8")
    ok = sum(c.status == "ok" for c in result.candidates)
    print(f"{ok}/{len(result.candidates)} candidates ok; surrogate R^2 {result.surrogate.r2}; "
          f"front size {len(result.front)}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dhen-cvr", description="Conversion-rate modeling experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic day partitions")
    g.add_argument("--config", required=True, help="YAML run config")
    g.add_argument("--out", required=True, help="output directory for day-*.jsonl files")
    g.add_argument("--days", type=int, required=True, help="number of day partitions")
    g.add_argument("--gzip", action="store_true", help="write gzip-compressed partitions")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on partitions, optionally warm-started")
    t.add_argument("--config", required=True, help="YAML run config")
    t.add_argument("--data", required=True, help="directory of training partitions")
    t.add_argument("--warm-start", help="checkpoint to resume from")
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--trace", help="metric trace path (default: <out>.trace.jsonl)")
    t.add_argument("--eval-data", help="partitions evaluated after each training partition")
    t.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on partitions")
    e.add_argument("--model", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="directory of evaluation partitions")
    e.add_argument("--report", required=True, help="JSONL report path; a .csv sibling is also written")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation plan")
    a.add_argument("--plan", required=True, help="crossing, dhen-depth, ssl or feature-category")
    a.add_argument("--config", required=True, help="YAML run config")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--seeds", help="comma-separated seeds (default: eval.seeds)")
    a.add_argument("--arms", help="comma-separated subset of arms (the baseline is always included)")
    a.add_argument("--jobs", type=int, default=0, help="parallel arm trainings (default: eval.jobs)")
    a.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("search", help="run the Pareto architecture search")
    s.add_argument("--config", required=True, help="YAML run config")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--jobs", type=int, default=0, help="parallel candidate evaluations (default: eval.jobs)")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.set_defaults(func=cmd_search)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("DHEN_CVR_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: diverged: {exc}; last good step {exc.last_good_step}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

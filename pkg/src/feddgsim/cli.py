"""Command-line front end.

``feddgsim run --config exp.json --out runs/exp`` trains every run of a
config and writes ``metrics.csv``, ``selection.json`` and per-run split
manifests and partition plans.  ``sweep`` repeats that over one axis,
``report`` aggregates metrics CSVs across seeds, ``difficulty`` computes the
dataset difficulty ratios and ``verify-plan`` checks a saved partition plan.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import partition as P
from .config import ConfigError, ExperimentConfig, SweepSpec, load_config
from .fedsim import CSV_COLUMNS, RunRecord, SimulationError, best_selection, build_federation, difficulty_report, run_experiment

__all__ = [
    "main",
    "execute_run",
    "execute_sweep",
    "aggregate_report",
    "write_metrics_csv",
    "read_metrics_csv",
    "SchemaError",
    "SUMMARY_COLUMNS",
    "REPORT_COLUMNS",
]

log = logging.getLogger("feddgsim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SUMMARY_COLUMNS = (
    "axis",
    "value",
    "rounds",
    "local_epochs",
    "runs",
    "dg_test_selected",
    "dg_test_mean",
    "dg_test_final_mean",
    "c1_holds",
    "c2_holds",
    "data_digest",
)
REPORT_COLUMNS = ("method", "lambda", "C", "E", "round", "split", "metric", "mean", "std", "n", "single_sample")


class SchemaError(ValueError):
    """A metrics CSV without the expected columns."""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_metrics_csv(path: Path, rows: Iterable[dict], columns: Sequence[str] = CSV_COLUMNS) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
            raise SchemaError(f"{path}: expected columns {','.join(CSV_COLUMNS)}, got {reader.fieldnames}")
        return list(reader)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _selection_rows(sel: dict, records: Sequence[RunRecord]) -> list[dict]:
    rec = records[sel["run"]]
    base = {
        "round": sel["round"],
        "method": rec.method,
        "lambda": rec.lam,
        "C": rec.C,
        "E": rec.E,
        "split": "selection",
        "seed": rec.seed,
        "config_hash": rec.config_hash,
    }
    rows = [{**base, "metric": f"{sel['validation_split']}_accuracy", "value": sel["validation_value"]}]
    if sel.get("dg_test") is not None:
        rows.append({**base, "metric": "dg_test_accuracy", "value": sel["dg_test"]})
    return rows


def execute_run(config: ExperimentConfig, out: str | Path, jobs: int = 1) -> tuple[list[RunRecord], dict]:
    """Run every seed of ``config`` and write its artifacts under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    records = []
    for run in range(config.runs):
        run_dir = out / f"run_{run}"
        run_dir.mkdir(exist_ok=True)
        ckpt = run_dir / "checkpoints" if config.checkpoints else None
        rec = run_experiment(config, run, jobs=jobs, checkpoint_dir=ckpt)
        fed = build_federation(config, run)
        (run_dir / "splits.json").write_text(fed.splits.manifest_json() + "\n", encoding="utf-8")
        (run_dir / "plan.json").write_text(rec.plan.to_json() + "\n", encoding="utf-8")
        _write_json(run_dir / "digests.json", rec.digests)
        records.append(rec)
        log.info("run %d done (seed %d)", run, rec.seed)
    sel = best_selection(records, config)
    rows = [row for rec in records for row in rec.csv_rows()]
    rows.extend(_selection_rows(sel, records))
    write_metrics_csv(out / "metrics.csv", rows)
    _write_json(out / "selection.json", sel)
    if config.difficulty:
        report = difficulty_report(config)
        (out / "difficulty.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return records, sel


def _sweep_point(config: ExperimentConfig, sweep: SweepSpec, value, out: Path, jobs: int) -> dict:
    cfg = sweep.apply(config, value)
    records, sel = execute_run(cfg, out / f"{sweep.axis}_{value}", jobs)
    per_run = [best_selection([r], cfg).get("dg_test") for r in records]
    finals = [r.values("dg_test")[-1] for r in records if r.values("dg_test")]
    sizes = records[0].plan.domain_sizes
    report = P.check_constraints(records[0].plan, sizes)
    return {
        "axis": sweep.axis,
        "value": value,
        "rounds": cfg.rounds,
        "local_epochs": cfg.local_epochs,
        "runs": cfg.runs,
        "dg_test_selected": sel.get("dg_test"),
        "dg_test_mean": float(np.mean(per_run)) if None not in per_run else None,
        "dg_test_final_mean": float(np.mean(finals)) if finals else None,
        "c1_holds": report.c1_holds,
        "c2_holds": report.c2_holds,
        "data_digest": records[0].digests["data"],
    }


def execute_sweep(config: ExperimentConfig, sweep: SweepSpec, out: str | Path, jobs: int = 1) -> list[dict]:
    """One sub-run directory per axis value plus ``summary.csv``.

    Points may run concurrently; the summary is written once all finish.  A
    failing point aborts the sweep but leaves finished points on disk.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "sweep.json", sweep.to_dict())
    for v in sweep.values:
        sweep.apply(config, v)  # surface config errors before any training
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda v: _sweep_point(config, sweep, v, out, 1), sweep.values))
    else:
        rows = [_sweep_point(config, sweep, v, out, 1) for v in sweep.values]
    write_metrics_csv(out / "summary.csv", rows, SUMMARY_COLUMNS)
    return rows


def aggregate_report(paths: Sequence[str | Path]) -> list[dict]:
    """Mean and sample standard deviation across seeds per plotted point.

    Groups on method, lambda, C, E, round, split and metric.  A group with
    one row gets ``std = 0`` and ``single_sample = true``.
    """
    if not paths:
        raise SchemaError("no metrics CSV given")
    groups: dict[tuple, list[float]] = {}
    for path in paths:
        for row in read_metrics_csv(path):
            key = (row["method"], row["lambda"], row["C"], row["E"], int(row["round"]), row["split"], row["metric"])
            groups.setdefault(key, []).append(float(row["value"]))
    if not groups:
        raise SchemaError("metrics CSVs contain no rows")
    out = []
    for key in sorted(groups, key=lambda k: (k[0], float(k[1]), int(k[2]), int(k[3]), k[4], k[5], k[6])):
        vals = groups[key]
        out.append(
            {
                **dict(zip(("method", "lambda", "C", "E", "round", "split", "metric"), key)),
                "mean": math.fsum(vals) / len(vals),
                "std": statistics.stdev(vals) if len(vals) > 1 else 0.0,
                "n": len(vals),
                "single_sample": len(vals) == 1,
            }
        )
    return out


def _verify_plan(plan_path: str, sizes: str | None) -> dict:
    try:
        plan = P.PartitionPlan.from_json(Path(plan_path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("plan", f"file not found: {plan_path}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError("plan", str(exc)) from None
    domain_sizes = None
    if sizes:
        try:
            domain_sizes = [int(s) for s in sizes.split(",")]
        except ValueError:
            raise ConfigError("sizes", "expected comma-separated integers") from None
    report = P.check_constraints(plan, domain_sizes)
    return {"c1_holds": report.c1_holds, "c2_holds": report.c2_holds, "variance": report.variance, "details": report.details}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddgsim", description="Federated domain generalization simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment JSON file")
        p.add_argument("--out", help="output directory (overrides config and environment)")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")

    common(sub.add_parser("run", help="train all runs of a config"))
    sw = sub.add_parser("sweep", help="repeat a config along one axis")
    common(sw)
    sw.add_argument("--sweep", help="sweep JSON file: {axis, values, fixed_total}")
    sw.add_argument("--axis", choices=("lambda", "clients", "communication"))
    sw.add_argument("--values", help="comma-separated axis values")
    sw.add_argument("--no-fixed-total", action="store_true", help="communication axis: keep E unchanged")

    rp = sub.add_parser("report", help="aggregate metrics CSVs across seeds")
    rp.add_argument("csvs", nargs="*", help="metrics CSV files")
    rp.add_argument("--out", help="write the aggregated CSV here instead of stdout")

    vp = sub.add_parser("verify-plan", help="check a partition plan")
    vp.add_argument("--plan", required=True, help="plan JSON file")
    vp.add_argument("--sizes", help="comma-separated domain sizes (default: row sums of the plan)")

    df = sub.add_parser("difficulty", help="compute the difficulty ratios")
    common(df)
    df.add_argument("--lambdas", default="1,0.1,0", help="comma-separated lambda values for the FL ratio")
    return parser


def _parse_values(text: str, axis: str) -> tuple:
    try:
        return tuple(float(v) if axis == "lambda" else int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError("sweep.values", f"cannot parse {text!r}") from None


def _dispatch(args) -> int:
    if args.command == "report":
        rows = aggregate_report(args.csvs)
        if args.out:
            write_metrics_csv(Path(args.out), rows, REPORT_COLUMNS)
        else:
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for row in rows:
                w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
        return EXIT_OK
    if args.command == "verify-plan":
        print(json.dumps(_verify_plan(args.plan, args.sizes), indent=2, sort_keys=True))
        return EXIT_OK

    if args.jobs < 1:
        raise ConfigError("jobs", "must be at least 1")
    config = load_config(args.config, seed=args.seed, out_dir=args.out)
    out = Path(config.output_dir)
    if args.command == "run":
        _, sel = execute_run(config, out, args.jobs)
        print(json.dumps(sel, sort_keys=True))
    elif args.command == "sweep":
        if args.sweep:
            try:
                payload = json.loads(Path(args.sweep).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError("sweep", str(exc)) from None
            sweep = SweepSpec.from_dict(payload)
        elif args.axis and args.values:
            sweep = SweepSpec(args.axis, _parse_values(args.values, args.axis), not args.no_fixed_total)
        else:
            raise ConfigError("sweep", "give --sweep FILE or both --axis and --values")
        execute_sweep(config, sweep, out, args.jobs)
        print(out / "summary.csv")
    elif args.command == "difficulty":
        try:
            lambdas = tuple(float(v) for v in args.lambdas.split(",") if v)
        except ValueError:
            raise ConfigError("lambdas", "expected comma-separated numbers") from None
        report = difficulty_report(config, lambdas)
        out.mkdir(parents=True, exist_ok=True)
        (out / "difficulty.json").write_text(report.to_json() + "\n", encoding="utf-8")
        print(report.to_json())
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, SchemaError, P.DirichletInfeasibleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, FloatingPointError, ValueError, OSError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""``prefrl`` command-line entry point.

Subcommands: ``run``, ``sweep``, ``validate`` and ``plot-data``.  Exit codes are
0 on success, 1 when a validation suite fails, 2 for configuration or missing
input errors and 3 for numerical errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import validation
from .config import config_to_dict, load_config, read_raw_config
from .errors import ConfigurationError, ModelMisspecificationError, NumericalError
from .harness import CSV_HEADER, RunMetrics, run, sweep_beta

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

DEFAULT_OUT = "prefrl-out"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def write_outputs(out_dir: Path, files: dict[str, str]) -> None:
    """Write every file to a temporary sibling first, then rename into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for rel, text in files.items():
            target = out_dir / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
            staged.append((tmp, target))
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
        for tmp, target in staged:
            os.replace(tmp, target)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get("PREFRL_OUT") or DEFAULT_OUT)


def _seed_override(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env_seed = os.environ.get("PREFRL_SEED")
    if env_seed is None or env_seed == "":
        return None
    try:
        return int(env_seed)
    except ValueError:
        raise ConfigurationError(f"PREFRL_SEED must be an integer, got {env_seed!r}") from None


def _load(args):
    if args.config is None:
        raise ConfigurationError("--config is required")
    cfg = load_config(args.config)
    seed = _seed_override(args)
    if seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=seed))
    return cfg


def _log(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr)


def cmd_run(args) -> int:
    cfg = _load(args)
    metrics = run(cfg.run)
    summary = {"config": config_to_dict(cfg), "summary": _summary(metrics)}
    files = {
        "episodes.csv": metrics.to_csv(),
        "records.jsonl": metrics.records_jsonl(),
        "summary.json": _dumps(summary),
    }
    posterior = metrics.extras.get("posterior")
    if posterior is not None:
        files["posterior.json"] = _dumps(posterior)
    out = _out_dir(args)
    write_outputs(out, files)
    _log(args, f"{metrics.run_id}: final regret {metrics.final_regret:.4f}, "
               f"{metrics.total_queries} queries over {metrics.episodes} episodes "
               f"({metrics.wall_clock:.1f}s) -> {out}")
    return EXIT_OK


def _summary(metrics: RunMetrics) -> dict:
    doc = metrics.summary()
    doc.pop("posterior", None)
    return doc


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if not cfg.sweep.seeds:
        raise ConfigurationError("sweep.seeds is empty")
    if not cfg.sweep.betas:
        raise ConfigurationError("sweep.betas is empty")
    seeds = [cfg.run.seed + s for s in cfg.sweep.seeds]
    jobs = args.jobs if args.jobs is not None else cfg.sweep.jobs
    result = sweep_beta(cfg.run, cfg.sweep.betas, seeds, jobs=jobs)
    files = {"aggregate.csv": result.aggregate_csv()}
    combined = io.StringIO()
    combined.write(CSV_HEADER)
    for key in sorted(result.runs):
        metrics = result.runs[key]
        files[f"runs/{metrics.run_id}.csv"] = metrics.to_csv()
        metrics.write_rows(combined)
    files["episodes.csv"] = combined.getvalue()
    files["summary.json"] = _dumps({
        "config": config_to_dict(cfg),
        "seeds": seeds,
        "aggregate": result.rows,
        "checks": {m.run_id: m.checks for _, m in sorted(result.runs.items())},
    })
    out = _out_dir(args)
    write_outputs(out, files)
    for row in result.rows:
        _log(args, f"beta={row['beta']:g}: mean regret {row['mean_final_regret']:.3f}, "
                   f"mean queries {row['mean_total_queries']:.1f} ({row['n_seeds']} seeds)")
    _log(args, f"wrote {len(result.runs)} runs to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    raw, error = None, None
    if args.config is not None:
        try:
            raw = read_raw_config(args.config)
        except ConfigurationError as exc:
            if not Path(args.config).exists():
                raise
            error = str(exc)
    report = validation.run_all(raw, error)
    text = _dumps(report)
    if args.out or os.environ.get("PREFRL_OUT"):
        write_outputs(_out_dir(args), {"validate.json": text})
    sys.stdout.write(text)
    for suite in report["suites"]:
        _log(args, f"{'PASS' if suite['passed'] else 'FAIL'} {suite['name']}")
    if not report["passed"]:
        print("validation failed: " + ", ".join(report["failures"]), file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def _read_episodes(in_dir: Path) -> dict[str, list[tuple[int, float, int]]]:
    path = in_dir / "episodes.csv"
    if not path.is_file():
        raise ConfigurationError(f"no episodes.csv in {in_dir}")
    series: dict[str, list[tuple[int, float, int]]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        expected = CSV_HEADER.strip().split(",")
        if reader.fieldnames != expected:
            raise ConfigurationError(f"{path}: expected columns {expected}, got {reader.fieldnames}")
        for row in reader:
            series.setdefault(row["run_id"], []).append(
                (int(row["t"]), float(row["regret_cum"]), int(row["queries_cum"]))
            )
    if not series:
        raise ConfigurationError(f"{path} has no data rows")
    return series


def downsample_indices(n: int, points: int) -> np.ndarray:
    """``points`` evenly spaced indices into ``range(n)``, always keeping both endpoints."""
    if points >= n:
        return np.arange(n)
    if points < 2:
        raise ConfigurationError("--points must be at least 2")
    return np.unique(np.round(np.linspace(0, n - 1, points)).astype(int))


def cmd_plot_data(args) -> int:
    in_dir = Path(args.input)
    if not in_dir.is_dir():
        raise ConfigurationError(f"input directory not found: {in_dir}")
    series = _read_episodes(in_dir)
    regret = ["run_id,t,regret_cum"]
    queries = ["run_id,t,queries_cum"]
    pareto = []
    for run_id in sorted(series):
        rows = sorted(series[run_id])
        for i in downsample_indices(len(rows), args.points):
            t, r, q = rows[i]
            regret.append(f"{run_id},{t},{r!r}")
            queries.append(f"{run_id},{t},{q}")
        pareto.append((rows[-1][2], rows[-1][1], run_id))
    pareto_lines = ["run_id,total_queries,final_regret"]
    pareto_lines += [f"{rid},{q},{r!r}" for q, r, rid in sorted(pareto)]
    out = Path(args.out) if args.out else in_dir
    write_outputs(out, {
        "regret_vs_t.csv": "\n".join(regret) + "\n",
        "queries_vs_t.csv": "\n".join(queries) + "\n",
        "pareto.csv": "\n".join(pareto_lines) + "\n",
    })
    _log(args, f"wrote plot data for {len(series)} run(s) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefrl", description="Preference-feedback RL experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_config: bool):
        p.add_argument("--config", required=need_config, help="YAML or JSON config file")
        p.add_argument("--out", help="output directory (default $PREFRL_OUT or ./prefrl-out)")
        p.add_argument("--seed", type=int, help="master seed override (default $PREFRL_SEED or config)")
        p.add_argument("--quiet", action="store_true", help="suppress progress messages on stderr")

    p_run = sub.add_parser("run", help="execute one run")
    common(p_run, True)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="beta sweep over seeds")
    common(p_sweep, True)
    p_sweep.add_argument("--jobs", type=int, help="parallel worker processes (default from config)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_val = sub.add_parser("validate", help="run the invariant suites")
    common(p_val, False)
    p_val.set_defaults(func=cmd_validate)

    p_plot = sub.add_parser("plot-data", help="emit plot-ready CSV from run or sweep output")
    p_plot.add_argument("--in", dest="input", required=True, help="directory holding episodes.csv")
    p_plot.add_argument("--out", help="output directory (default: the input directory)")
    p_plot.add_argument("--points", type=int, default=100, help="points per downsampled series")
    p_plot.add_argument("--quiet", action="store_true")
    p_plot.set_defaults(func=cmd_plot_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the config-error code
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"prefrl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ModelMisspecificationError) as exc:
        print(f"prefrl: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``voltcast <command> ...``.

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import data as vdata
from .forecaster import ModelDims, assemble_model, load_model, predict, save_model, train_model, write_forecast_csv
from .kalman import KalmanConfig, run_online
from .metrics import ModelRun, reports_to_json, run_report
from .plots import export_plot_data, read_reference_weights
from .search import Candidate, EAConfig, SearchSpace, read_history, read_kind_counts_csv, run_search, smoothing_kind_history, write_history

log = logging.getLogger("voltcast")


def _parse_range(text: str, ds: vdata.Dataset) -> tuple[int, int]:
    """``A:B`` with day indices or ISO dates; B is exclusive."""
    try:
        a, b = text.split(":")
    except ValueError:
        raise ValueError(f"range must look like A:B, got {text!r}") from None

    def day(x: str) -> int:
        x = x.strip()
        return int(x) if x.lstrip("-").isdigit() else ds.day_of(dt.date.fromisoformat(x))

    return day(a), day(b)


def cmd_synth(args) -> None:
    cfg = vdata.SyntheticConfig.from_json(args.config)
    ds, truth = vdata.generate_synthetic(cfg)
    vdata.write_dataset_dir(ds, args.out, truth)
    log.info("wrote synthetic dataset with %d days to %s", ds.n_days, args.out)


def cmd_train(args) -> None:
    ds = vdata.load_dataset_dir(args.data)
    candidate = Candidate.from_dict(json.loads(Path(args.candidate).read_text()))
    seed = candidate.id if args.seed is None else args.seed
    model = assemble_model(candidate, ModelDims.from_dataset(ds), seed=seed)
    cfg = candidate.train_config(seed)
    model, curve = train_model(model, ds, cfg)
    save_model(model, args.out, ds=ds, train_cfg=cfg, loss_curve=curve)
    log.info("final training mse %.6g", curve[-1] if curve else float("nan"))


def cmd_forecast(args) -> None:
    ds = vdata.load_dataset_dir(args.data)
    model = load_model(args.model)
    day_range = _parse_range(args.range, ds) if args.range else ds.splits.test
    if args.recalibrate:
        cfg = KalmanConfig(sigma2=args.sigma2, q_diag=args.q, p0=args.p0, delay_days=args.delay)
        recal = run_online(model, ds, day_range, cfg)
        write_forecast_csv(args.out, ds, recal.days, recal.forecasts, recal.static)
        if args.trajectory:
            Path(args.trajectory).write_text(recal.trajectory_json(ds))
    else:
        pred = predict(model, ds, day_range)
        write_forecast_csv(args.out, ds, pred.days, pred.forecasts)


def cmd_search(args) -> None:
    ds = vdata.load_dataset_dir(args.data)
    space = SearchSpace.from_json(args.space)
    cfg = EAConfig(
        population_size=args.pop,
        budget_evaluations=args.budget,
        workers=args.workers,
        seed=args.seed,
        tournament_size=args.tournament,
        mutation_rate=args.mutation_rate,
        offspring_batch=args.offspring_batch,
    )
    best, history = run_search(space, cfg, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_history(history, out / "history.jsonl", timings=args.timings)
    (out / "best.json").write_text(json.dumps(best.to_dict(), indent=2))
    smoothing_kind_history(history).to_csv(out / "smoothing_kinds.csv")
    best_result = min(history, key=lambda r: (r.objective, r.candidate_id))
    print(f"best candidate {best.id}: validation mse {best_result.validation_mse:.6g}, "
          f"mape {best_result.validation_mape_mw:.3f}%")


def _read_run(path: Path, ds: vdata.Dataset) -> ModelRun:
    csv_path = path / "forecasts.csv" if path.is_dir() else path
    frame = pd.read_csv(csv_path, float_precision="round_trip")
    if not {"date", "instant", "forecast_mw"} <= set(frame.columns):
        raise ValueError(f"{csv_path}: expected columns date,instant,forecast_mw[,static_forecast_mw]")
    days = np.array([ds.day_of(dt.date.fromisoformat(d)) for d in frame["date"].unique()])
    h = ds.steps_per_day
    if len(frame) != len(days) * h:
        raise ValueError(f"{csv_path}: every day needs {h} instants")
    frame = frame.sort_values(["date", "instant"])
    recal = frame["forecast_mw"].to_numpy(dtype=float).reshape(-1, h)
    static = frame["static_forecast_mw"].to_numpy(dtype=float).reshape(-1, h) if "static_forecast_mw" in frame else recal
    name = path.name if path.is_dir() else path.stem
    return ModelRun(name, np.sort(days), static, recal)


def cmd_report(args) -> None:
    ds = vdata.load_dataset_dir(args.data)
    period = _parse_range(args.period, ds) if args.period else ds.splits.test
    paths = [Path(p) for p in args.runs.split(",") if p]
    runs = [_read_run(p, ds) for p in paths]
    reports, table = run_report(runs, ds.load, period, ds.scaler)
    print(table)
    telemetry = {}
    for p in paths:
        kinds_csv = p / "smoothing_kinds.csv" if p.is_dir() else None
        if kinds_csv is not None and kinds_csv.exists():
            counts = read_kind_counts_csv(kinds_csv)
            telemetry[p.name] = {k: c.tolist() for k, c in counts.items()}
    if args.out:
        Path(args.out).write_text(reports_to_json(reports, smoothing_kinds=telemetry))


def cmd_export_plots(args) -> None:
    ds = vdata.load_dataset_dir(args.data)
    model = load_model(args.model)
    ref = read_reference_weights(args.reference_weights, ds) if args.reference_weights else None
    history = read_history(args.history) if args.history else None
    for path in export_plot_data(model, ds, args.out, reference_weights=ref, history=history, reference_alpha=args.reference_alpha):
        log.info("wrote %s", path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voltcast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one candidate")
    p.add_argument("--data", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="static or recalibrated forecasts for a day range")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--range", default=None, help="A:B day indices or ISO dates, B exclusive (default: test split)")
    p.add_argument("--recalibrate", action="store_true")
    p.add_argument("--sigma2", type=float, default=1e-2)
    p.add_argument("--q", type=float, default=1e-5)
    p.add_argument("--p0", type=float, default=1.0)
    p.add_argument("--delay", type=int, default=2)
    p.add_argument("--out", default="forecasts.csv")
    p.add_argument("--trajectory", default=None, help="write the filter state trajectory JSON here")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("search", help="steady-state evolutionary search")
    p.add_argument("--data", required=True)
    p.add_argument("--space", required=True)
    p.add_argument("--pop", type=int, default=16)
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tournament", type=int, default=2)
    p.add_argument("--mutation-rate", type=float, default=0.3)
    p.add_argument("--offspring-batch", type=int, default=4)
    p.add_argument("--timings", action="store_true", help="include wall-clock seconds in history.jsonl")
    p.add_argument("--out", default="search_out")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="static vs recalibrated MAPE table")
    p.add_argument("--runs", required=True, help="comma-separated forecast CSVs or run directories")
    p.add_argument("--data", required=True)
    p.add_argument("--period", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-plots", help="write figure data CSVs")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference-weights", default=None)
    p.add_argument("--reference-alpha", type=float, default=0.9)
    p.add_argument("--history", default=None)
    p.set_defaults(func=cmd_export_plots)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("VOLTCAST_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Forecast error metrics and the static-vs-recalibrated comparison table."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .data import LoadSeries, ScalerParams


def compute_mse(y, y_hat) -> float:
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise ValueError("empty series")
    return float(np.mean((y - y_hat) ** 2))


def compute_mape(y, y_hat) -> float:
    """Mean absolute percentage error, in percent."""
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise ValueError("empty series")
    if np.any(y == 0):
        raise ValueError("MAPE is undefined when a ground-truth value is zero")
    return float(100.0 * np.mean(np.abs(y - y_hat) / np.abs(y)))


@dataclass
class ModelRun:
    """Forecasts of one model; ``days`` are dataset day indices aligned with the rows."""

    name: str
    days: np.ndarray
    static: np.ndarray  # (days, H) MW
    recalibrated: np.ndarray  # (days, H) MW


@dataclass
class MetricReport:
    model_name: str
    static_mape: float
    recalibrated_mape: float
    mse_scaled: float
    period: tuple  # (first date, last date) inclusive, ISO strings


def run_report(runs: Sequence[ModelRun], load: LoadSeries, period: tuple[int, int],
               scaler: Optional[ScalerParams] = None) -> tuple[list[MetricReport], str]:
    """One row per model over ``period`` (day indices, end exclusive). Excluded days are skipped."""
    a, b = period
    if not 0 <= a < b <= load.values.shape[0]:
        raise ValueError(f"period {period} outside the load series")
    wanted = np.arange(a, b)
    keep = ~load.exclusion_mask[a:b]
    y = load.values[a:b][keep]
    first = (load.start_date + dt.timedelta(days=a)).isoformat()
    last = (load.start_date + dt.timedelta(days=b - 1)).isoformat()
    reports = []
    for run in runs:
        pos = {int(d): k for k, d in enumerate(run.days)}
        missing = [int(d) for d in wanted if int(d) not in pos]
        if missing:
            raise ValueError(f"{run.name}: forecasts do not cover day {missing[0]} of the period")
        rows = np.array([pos[int(d)] for d in wanted])[keep]
        static, recal = run.static[rows], run.recalibrated[rows]
        mse = compute_mse(scaler.scale_load(y), scaler.scale_load(recal)) if scaler is not None else float("nan")
        reports.append(MetricReport(run.name, compute_mape(y, static), compute_mape(y, recal), mse, (first, last)))
    return reports, render_table(reports)


def render_table(reports: Sequence[MetricReport]) -> str:
    width = max([len("Model")] + [len(r.model_name) for r in reports])
    lines = [f"{'Model':<{width}}  {'MAPE':>8}  {'Recalibration':>13}  {'MAPE':>8}", "-" * (width + 37)]
    for r in reports:
        lines.append(f"{r.model_name:<{width}}  {r.static_mape:8.3f}  {'Kalman':>13}  {r.recalibrated_mape:8.3f}")
    if reports:
        lines.append(f"period {reports[0].period[0]} .. {reports[0].period[1]}")
    return "\n".join(lines)


def reports_to_json(reports: Sequence[MetricReport], **extra) -> str:
    return json.dumps({"models": [asdict(r) for r in reports], **extra}, indent=2)

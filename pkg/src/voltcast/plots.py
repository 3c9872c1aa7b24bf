"""CSV exports behind the weather-modeling and search-telemetry figures."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import Dataset, exp_smooth
from .forecaster import ForecastModel, _inputs
from .search import EvalResult, smoothing_kind_history


def learned_weather(model: ForecastModel, ds: Dataset, chunk: int = 32) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Aggregated channels per variable and smoothed temperature channels, streamed
    from the start of training to the end of the dataset."""
    start = ds.splits.train[0]
    module = model.weather
    module.reset_carry()
    aggs, smooth = [], []
    with torch.no_grad():
        for lo in range(start, ds.n_days, chunk):
            days = np.arange(lo, min(lo + chunk, ds.n_days))
            w, _ = _inputs(ds, days)
            agg, sm = module.parts(w)
            aggs.append(agg.numpy())
            smooth.append(sm.numpy())
    module.reset_carry()
    agg = np.concatenate(aggs)
    splits = np.cumsum([p.out_dim for p in module.ponderations])[:-1]
    return np.split(agg, splits, axis=-1), np.concatenate(smooth), np.arange(start, ds.n_days)


def read_reference_weights(path, ds: Dataset) -> np.ndarray:
    """``station_id,variable,weight`` rows; variables or stations not listed get weight 0."""
    ids = {s.station_id: k for k, s in enumerate(ds.weather.stations)}
    names = {v: k for k, v in enumerate(ds.weather.variable_names)}
    out = np.zeros((ds.n_variables, ds.n_stations))
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out[names[rec["variable"]], ids[rec["station_id"]]] = float(rec["weight"])
    return out


def export_plot_data(
    model: ForecastModel,
    ds: Dataset,
    out_dir,
    reference_weights: Optional[np.ndarray] = None,
    history: Optional[Sequence[EvalResult]] = None,
    reference_alpha: float = 0.9,
) -> list[Path]:
    """Write the figure data files and return their paths.

    Signals are in scaled space. The reference aggregation defaults to uniform
    station weights; the reference smoothing applies ``reference_alpha`` to the
    reference temperature aggregate.
    """
    if not getattr(model, "trained", False):
        raise ValueError("model has not been trained")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    v, i = ds.n_variables, ds.n_stations
    ref_w = np.full((v, i), 1.0 / i) if reference_weights is None else np.asarray(reference_weights, dtype=float)
    if ref_w.shape != (v, i):
        raise ValueError(f"reference weights must have shape {(v, i)}")

    learned, smoothed, days = learned_weather(model, ds)
    reference = np.einsum("thvi,vi->thv", ds.weather.values[days], ref_w)
    dates = [ds.date_of(int(d)).isoformat() for d in days]
    h = ds.steps_per_day
    written = []

    for var, name in enumerate(ds.weather.variable_names):
        path = out / f"aggregated_{name}.csv"
        k = learned[var].shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "instant"] + [f"learned_{c}" for c in range(k)] + ["reference"])
            for t, date in enumerate(dates):
                for step in range(h):
                    w.writerow([date, step] + [repr(float(x)) for x in learned[var][t, step]] + [repr(float(reference[t, step, var]))])
        written.append(path)

    ref_smooth = exp_smooth(reference[..., 0], reference_alpha)
    path = out / "smoothed_temperature.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "instant"] + [f"smoothed_{c}" for c in range(smoothed.shape[-1])] + ["reference"])
        for t, date in enumerate(dates):
            for step in range(h):
                w.writerow([date, step] + [repr(float(x)) for x in smoothed[t, step]] + [repr(float(ref_smooth[t, step]))])
    written.append(path)

    path = out / "ponderation_weights.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "variable", "channel", "weight"])
        for var, layer in enumerate(model.weather.ponderations):
            weights = layer.weights.detach().numpy()
            for c in range(weights.shape[0]):
                for s, station in enumerate(ds.weather.stations):
                    w.writerow([station.station_id, ds.weather.variable_names[var], c, repr(float(weights[c, s]))])
    written.append(path)

    if history:
        path = out / "smoothing_kinds.csv"
        smoothing_kind_history(history).to_csv(path)
        written.append(path)
    return written

"""Load, weather and calendar data: ingestion, scaling, splits and synthetic generation."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import pandas as pd


class IngestionError(ValueError):
    """Raised when an input file violates its schema or content contract."""


class ScalingError(ValueError):
    pass


class SplitError(ValueError):
    pass


DayRange = tuple[int, int]


@dataclass(frozen=True)
class StationMeta:
    station_id: str
    name: str
    latitude: float
    longitude: float

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range for {self.station_id}: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range for {self.station_id}: {self.longitude}")


@dataclass(frozen=True)
class WeatherPanel:
    """Weather tensor of shape (days, steps_per_day, variables, stations)."""

    values: np.ndarray
    variable_names: list[str]
    stations: list[StationMeta]
    start_date: dt.date
    steps_per_day: int

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError(f"weather values must be 4-D, got shape {self.values.shape}")
        t, h, v, i = self.values.shape
        if t < 1 or h < 1:
            raise ValueError("weather panel needs at least one day and one step")
        if h != self.steps_per_day:
            raise ValueError(f"steps_per_day={self.steps_per_day} but tensor has H={h}")
        if len(self.variable_names) != v or len(set(self.variable_names)) != v:
            raise ValueError("variable_names must be distinct and match the variable axis")
        if len(self.stations) != i:
            raise ValueError("stations must match the station axis")
        ids = [s.station_id for s in self.stations]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate station_id in panel")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("weather panel contains non-finite values")

    @property
    def n_days(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class LoadSeries:
    values: np.ndarray  # (T, H), MW
    start_date: dt.date
    exclusion_mask: np.ndarray = None

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("load values must be (days, steps)")
        if self.exclusion_mask is None:
            object.__setattr__(self, "exclusion_mask", np.zeros(self.values.shape[0], dtype=bool))
        mask = np.asarray(self.exclusion_mask, dtype=bool)
        if mask.shape != (self.values.shape[0],):
            raise ValueError("exclusion_mask must have one entry per day")
        object.__setattr__(self, "exclusion_mask", mask)
        included = self.values[~mask]
        if not np.all(np.isfinite(included)) or np.any(included <= 0):
            raise ValueError("included load values must be finite and positive")


@dataclass(frozen=True)
class CalendarMatrix:
    values: np.ndarray  # (T, H, F)
    feature_names: list[str]

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != len(self.feature_names):
            raise ValueError("calendar values must be (T, H, F) with F feature names")


@dataclass(frozen=True)
class ScalerParams:
    """Min-max extremes per (variable, station), for the aggregates, and for the load."""

    mins: np.ndarray
    maxs: np.ndarray
    aggregate_mins: np.ndarray
    aggregate_maxs: np.ndarray
    load_min: float = 0.0
    load_max: float = 1.0

    def scale_load(self, y):
        return (np.asarray(y) - self.load_min) / (self.load_max - self.load_min)

    def unscale_load(self, y):
        return np.asarray(y) * (self.load_max - self.load_min) + self.load_min

    def unscale_weather(self, scaled):
        return scaled * (self.maxs - self.mins) + self.mins

    def to_dict(self) -> dict:
        return {
            "mins": self.mins.tolist(),
            "maxs": self.maxs.tolist(),
            "aggregate_mins": self.aggregate_mins.tolist(),
            "aggregate_maxs": self.aggregate_maxs.tolist(),
            "load_min": self.load_min,
            "load_max": self.load_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(
            mins=np.asarray(d["mins"], dtype=float),
            maxs=np.asarray(d["maxs"], dtype=float),
            aggregate_mins=np.asarray(d["aggregate_mins"], dtype=float),
            aggregate_maxs=np.asarray(d["aggregate_maxs"], dtype=float),
            load_min=float(d["load_min"]),
            load_max=float(d["load_max"]),
        )


@dataclass(frozen=True)
class Splits:
    train: DayRange
    valid: DayRange
    test: DayRange

    def as_dict(self) -> dict:
        return {"train": list(self.train), "valid": list(self.valid), "test": list(self.test)}


@dataclass(frozen=True)
class Dataset:
    """Scaled model inputs plus the raw panel they came from.

    ``weather`` is min-max scaled with ``scaler``; ``raw_weather`` is kept so
    the scaler can be refit when the splits change.
    """

    weather: WeatherPanel
    calendar: CalendarMatrix
    load: LoadSeries
    scaler: ScalerParams
    splits: Splits
    raw_weather: WeatherPanel
    holidays: tuple = ()

    @property
    def n_days(self) -> int:
        return self.load.values.shape[0]

    @property
    def steps_per_day(self) -> int:
        return self.load.values.shape[1]

    @property
    def n_variables(self) -> int:
        return self.weather.values.shape[2]

    @property
    def n_stations(self) -> int:
        return self.weather.values.shape[3]

    @property
    def n_calendar(self) -> int:
        return self.calendar.values.shape[2]

    @property
    def scaled_load(self) -> np.ndarray:
        return self.scaler.scale_load(self.load.values)

    def date_of(self, day: int) -> dt.date:
        return self.load.start_date + dt.timedelta(days=day)

    def day_of(self, date: dt.date) -> int:
        return (date - self.load.start_date).days


@dataclass(frozen=True)
class Batch:
    """Contiguous chronological block of days; ``loss_days`` excludes masked days."""

    days: np.ndarray
    loss_days: np.ndarray


@dataclass
class SyntheticConfig:
    t_days: int = 240
    h: int = 48
    v: int = 3
    i: int = 8
    noise_sigma: float = 300.0
    true_alpha: float = 0.8
    seed: int = 0
    start_date: str = "2018-01-01"
    train_frac: float = 0.6
    valid_frac: float = 0.2
    # "heating": piecewise-linear response of the smoothed aggregate plus calendar effects.
    # "linear": load is an affine function of the raw aggregated temperature only.
    response: str = "heating"
    constant_weather: bool = False
    level_shift: float = 0.0  # relative shift applied to test-period load
    excluded_days: list = field(default_factory=list)

    @classmethod
    def from_json(cls, path) -> "SyntheticConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass(frozen=True)
class SyntheticTruth:
    true_weights: np.ndarray  # (V, I), rows sum to 1
    true_alpha: float
    response_spec: str
    noise_sigma: float
    clean_load: np.ndarray  # (T, H) MW, noise-free generating function
    aggregate: np.ndarray  # (T, H, V) raw-space true aggregation
    smoothed_temperature: np.ndarray  # (T, H)
    noise: np.ndarray  # (T, H)

    def __post_init__(self):
        w = self.true_weights
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("true weights must be nonnegative and sum to 1 per variable")


# ---------------------------------------------------------------- ingestion


def _parse_ts(text: str, row: int) -> pd.Timestamp:
    try:
        ts = pd.Timestamp(text)
    except (ValueError, TypeError) as exc:
        raise IngestionError(f"row {row}: bad timestamp {text!r}") from exc
    if ts.tzinfo is not None:
        ts = ts.tz_convert("UTC").tz_localize(None)
    return ts


def load_stations_csv(path) -> list[StationMeta]:
    frame = pd.read_csv(path, dtype={"station_id": str, "name": str})
    expected = ["station_id", "name", "lat", "lon"]
    if list(frame.columns) != expected:
        raise IngestionError(f"{path}: expected header {','.join(expected)}")
    stations = []
    for row, rec in enumerate(frame.itertuples(index=False), start=2):
        try:
            stations.append(StationMeta(rec.station_id, rec.name, float(rec.lat), float(rec.lon)))
        except ValueError as exc:
            raise IngestionError(f"{path} row {row}: {exc}") from exc
    ids = [s.station_id for s in stations]
    if len(set(ids)) != len(ids):
        raise IngestionError(f"{path}: duplicate station_id")
    return stations


def _interp_exact(x: np.ndarray, xp: np.ndarray, fp: np.ndarray) -> np.ndarray:
    """np.interp with nearest-value hold, returning sample values bit-exactly at sample points."""
    out = np.interp(x, xp, fp)
    pos = np.clip(np.searchsorted(xp, x), 0, len(xp) - 1)
    hit = xp[pos] == x
    out[hit] = fp[pos[hit]]
    return out


def load_weather_csv(path, stations_path, target_steps_per_day: int) -> WeatherPanel:
    """Read long-format weather samples and resample them onto a regular daily grid.

    Each (station, variable) series is linearly interpolated onto
    ``target_steps_per_day`` instants per day; instants before the first or
    after the last sample hold the nearest sample value.
    """
    if target_steps_per_day < 1:
        raise ValueError("target_steps_per_day must be >= 1")
    stations = load_stations_csv(stations_path)
    index = {s.station_id: k for k, s in enumerate(stations)}

    frame = pd.read_csv(path, dtype={"station_id": str, "variable": str, "timestamp_utc": str}, float_precision="round_trip")
    expected = ["timestamp_utc", "station_id", "variable", "value"]
    if list(frame.columns) != expected:
        raise IngestionError(f"{path}: expected header {','.join(expected)}")
    if frame.empty:
        raise IngestionError(f"{path}: no rows")

    # row numbers are 1-based file lines (header is line 1)
    frame["row"] = np.arange(2, len(frame) + 2)
    unknown = ~frame["station_id"].isin(index)
    if unknown.any():
        bad = frame[unknown].iloc[0]
        raise IngestionError(f"{path} row {bad.row}: unknown station_id {bad.station_id!r}")
    values = pd.to_numeric(frame["value"], errors="coerce").to_numpy(dtype=float)
    nonfinite = ~np.isfinite(values)
    if nonfinite.any():
        bad = frame[nonfinite].iloc[0]
        raise IngestionError(f"{path} row {bad.row}: non-finite value {bad.value!r}")
    frame["value"] = values
    try:
        stamps = pd.to_datetime(frame["timestamp_utc"], utc=True)
    except (ValueError, TypeError) as exc:
        raise IngestionError(f"{path}: unparseable timestamp ({exc})") from exc
    frame["ts"] = stamps.dt.tz_localize(None)

    variables = list(dict.fromkeys(frame["variable"]))
    first_day = frame["ts"].min().normalize()
    last_day = frame["ts"].max().normalize()
    n_days = int((last_day - first_day).days) + 1
    h = target_steps_per_day
    grid = first_day + pd.to_timedelta(np.arange(n_days * h) * (86400.0 / h), unit="s")
    grid_sec = (grid - first_day).total_seconds().to_numpy()

    out = np.empty((n_days, h, len(variables), len(stations)))
    groups = frame.groupby(["station_id", "variable"], sort=False)
    for vi, var in enumerate(variables):
        for st in stations:
            key = (st.station_id, var)
            if key not in groups.groups:
                raise IngestionError(f"{path}: series for station {st.station_id!r}, variable {var!r} is missing")
            g = groups.get_group(key)
            sec = (g["ts"] - first_day).dt.total_seconds().to_numpy()
            steps = np.diff(sec)
            if np.any(steps <= 0):
                bad = g.iloc[int(np.argmax(steps <= 0)) + 1]
                raise IngestionError(
                    f"{path} row {bad.row}: timestamps not strictly increasing for "
                    f"station {st.station_id!r}, variable {var!r}"
                )
            out[:, :, vi, index[st.station_id]] = _interp_exact(grid_sec, sec, g["value"].to_numpy()).reshape(n_days, h)
    return WeatherPanel(out, variables, stations, first_day.date(), h)


def load_load_csv(path) -> LoadSeries:
    frame = pd.read_csv(path, dtype={"timestamp_utc": str}, float_precision="round_trip")
    if list(frame.columns) != ["timestamp_utc", "load_mw"]:
        raise IngestionError(f"{path}: expected header timestamp_utc,load_mw")
    if len(frame) < 2:
        raise IngestionError(f"{path}: need at least two rows to infer the cadence")
    ts = pd.to_datetime(frame["timestamp_utc"], utc=True).dt.tz_localize(None)
    dup = ts.duplicated()
    if dup.any():
        raise IngestionError(f"{path}: duplicated timestamp {frame['timestamp_utc'][dup.idxmax()]}")
    if not ts.is_monotonic_increasing:
        raise IngestionError(f"{path}: timestamps must be increasing")
    load = pd.to_numeric(frame["load_mw"], errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(load) | (load <= 0)
    if bad.any():
        k = int(np.argmax(bad))
        raise IngestionError(f"{path}: nonpositive or invalid load {frame['load_mw'][k]!r} at {frame['timestamp_utc'][k]}")

    step = (ts.diff().dropna()).min()
    step_s = step.total_seconds()
    if 86400 % step_s != 0:
        raise IngestionError(f"{path}: cadence {step} does not divide a day")
    h = int(86400 // step_s)
    start = ts.iloc[0]
    if start != start.normalize():
        raise IngestionError(f"{path}: series must start at midnight, got {start}")
    n = len(ts)
    expected = pd.DatetimeIndex(start + step * np.arange(n))
    mismatch = ts.to_numpy() != expected.to_numpy()
    if mismatch.any():
        raise IngestionError(f"{path}: gap in grid, first missing timestamp {expected[int(np.argmax(mismatch))].isoformat()}")
    if n % h != 0:
        raise IngestionError(f"{path}: gap in grid, first missing timestamp {(start + step * n).isoformat()}")
    return LoadSeries(load.reshape(n // h, h), start.date())


# ---------------------------------------------------------------- calendar


def build_calendar(start_date: dt.date, t_days: int, h: int, holidays: Sequence[dt.date] = ()) -> CalendarMatrix:
    """Calendar features per instant: day-of-week and month one-hots, scaled year,
    holiday / day-before / day-after flags and the intra-day position h/H."""
    if t_days < 1 or h < 1:
        raise ValueError("t_days and h must be >= 1")
    holidays = set(holidays)
    names = (
        [f"dow_{k}" for k in range(7)]
        + [f"month_{m}" for m in range(1, 13)]
        + ["year", "holiday", "day_before_holiday", "day_after_holiday", "intraday"]
    )
    dates = [start_date + dt.timedelta(days=d) for d in range(t_days)]
    first_year, last_year = dates[0].year, dates[-1].year
    span = max(last_year - first_year, 1)
    day_feats = np.zeros((t_days, len(names) - 1))
    for d, date in enumerate(dates):
        day_feats[d, date.weekday()] = 1.0
        day_feats[d, 7 + date.month - 1] = 1.0
        day_feats[d, 19] = (date.year - first_year) / span
        day_feats[d, 20] = float(date in holidays)
        day_feats[d, 21] = float(date + dt.timedelta(days=1) in holidays)
        day_feats[d, 22] = float(date - dt.timedelta(days=1) in holidays)
    values = np.empty((t_days, h, len(names)))
    values[:, :, :-1] = day_feats[:, None, :]
    values[:, :, -1] = np.arange(h)[None, :] / h
    return CalendarMatrix(values, names)


# ---------------------------------------------------------------- scaling


def _check_range(r: DayRange, n: int, what: str) -> None:
    a, b = r
    if not (0 <= a < b <= n):
        raise SplitError(f"{what} range {r} is empty or outside [0, {n})")


def fit_scaler(
    panel: WeatherPanel,
    train_range: DayRange,
    weights_hint: Optional[np.ndarray] = None,
    load: Optional[LoadSeries] = None,
    allow_degenerate: bool = False,
) -> ScalerParams:
    """Fit min-max extremes on the training days only.

    Aggregate extremes come from the ``weights_hint`` aggregation when given,
    otherwise from the uniform aggregation over stations.
    """
    a, b = train_range
    if b <= a:
        raise ScalingError("train_range is empty")
    _check_range(train_range, panel.n_days, "train")
    block = panel.values[a:b]
    mins = block.min(axis=(0, 1))
    maxs = block.max(axis=(0, 1))
    degenerate = np.argwhere(maxs == mins)
    if len(degenerate):
        if not allow_degenerate:
            offenders = ", ".join(
                f"({panel.variable_names[v]}, {panel.stations[i].station_id})" for v, i in degenerate
            )
            raise ScalingError(f"degenerate channels (max == min): {offenders}")
        maxs = np.where(maxs == mins, mins + 1.0, maxs)

    v, i = mins.shape
    weights = np.full((v, i), 1.0 / i) if weights_hint is None else np.asarray(weights_hint, dtype=float)
    if weights.shape != (v, i):
        raise ScalingError(f"weights_hint must have shape {(v, i)}")
    agg = np.einsum("thvi,vi->thv", block, weights)
    agg_min = agg.min(axis=(0, 1))
    agg_max = agg.max(axis=(0, 1))
    agg_max = np.where(agg_max == agg_min, agg_min + 1.0, agg_max)

    load_min, load_max = 0.0, 1.0
    if load is not None:
        keep = ~load.exclusion_mask[a:b]
        vals = load.values[a:b][keep]
        if vals.size:
            load_min, load_max = float(vals.min()), float(vals.max())
            if load_max == load_min:
                load_max = load_min + 1.0
    return ScalerParams(mins, maxs, agg_min, agg_max, load_min, load_max)


def apply_scaler(panel: WeatherPanel, scaler: ScalerParams) -> WeatherPanel:
    if panel.values.shape[2:] != scaler.mins.shape:
        raise ScalingError(f"panel (V, I) = {panel.values.shape[2:]} does not match scaler {scaler.mins.shape}")
    scaled = (panel.values - scaler.mins) / (scaler.maxs - scaler.mins)
    return WeatherPanel(scaled, list(panel.variable_names), list(panel.stations), panel.start_date, panel.steps_per_day)


# ---------------------------------------------------------------- datasets


def make_dataset(
    raw_weather: WeatherPanel,
    load: LoadSeries,
    calendar: CalendarMatrix,
    train: DayRange,
    valid: DayRange,
    test: DayRange,
    holidays: Sequence[dt.date] = (),
    weights_hint: Optional[np.ndarray] = None,
    allow_degenerate: bool = False,
) -> Dataset:
    t, h = load.values.shape
    if raw_weather.values.shape[:2] != (t, h) or calendar.values.shape[:2] != (t, h):
        raise ValueError(
            f"weather {raw_weather.values.shape[:2]}, calendar {calendar.values.shape[:2]} "
            f"and load {(t, h)} disagree on (T, H)"
        )
    splits = _validate_splits(train, valid, test, t)
    scaler = fit_scaler(raw_weather, splits.train, weights_hint, load=load, allow_degenerate=allow_degenerate)
    return Dataset(
        weather=apply_scaler(raw_weather, scaler),
        calendar=calendar,
        load=load,
        scaler=scaler,
        splits=splits,
        raw_weather=raw_weather,
        holidays=tuple(holidays),
    )


def _validate_splits(train: DayRange, valid: DayRange, test: DayRange, n: int) -> Splits:
    ranges = [tuple(int(x) for x in r) for r in (train, valid, test)]
    for r, name in zip(ranges, ("train", "valid", "test")):
        _check_range(r, n, name)
    (ta, tb), (va, vb), (sa, sb) = ranges
    if not (tb <= va and vb <= sa):
        raise SplitError(f"splits must be disjoint and chronological: {ranges}")
    return Splits(*ranges)


def split_dataset(ds: Dataset, train: DayRange, valid: DayRange, test: DayRange) -> Dataset:
    """Re-split a dataset; the scaler is refit on the new training range."""
    return make_dataset(
        ds.raw_weather, ds.load, ds.calendar, train, valid, test, holidays=ds.holidays,
        allow_degenerate=bool(np.any(ds.raw_weather.values.min(axis=(0, 1)) == ds.raw_weather.values.max(axis=(0, 1)))),
    )


def iter_batches(ds: Dataset, day_range: DayRange, batch_size: int) -> Iterator[Batch]:
    """Chronological contiguous batches. Excluded days stay in ``days`` (carry
    continuity) but are dropped from ``loss_days``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    a, b = day_range
    mask = ds.load.exclusion_mask
    for start in range(a, b, batch_size):
        days = np.arange(start, min(start + batch_size, b))
        yield Batch(days, days[~mask[days]])


# ---------------------------------------------------------------- synthetic data

FIXED_HOLIDAYS = [(1, 1), (5, 1), (5, 8), (7, 14), (8, 15), (11, 1), (11, 11), (12, 25)]


def _holidays_between(start: dt.date, n_days: int) -> list[dt.date]:
    end = start + dt.timedelta(days=n_days - 1)
    return [
        dt.date(y, m, d)
        for y in range(start.year, end.year + 1)
        for m, d in FIXED_HOLIDAYS
        if start <= dt.date(y, m, d) <= end
    ]


def _daily_ar1(rng: np.random.Generator, n_days: int, size: int, phi: float, sd: float) -> np.ndarray:
    """AR(1) daily anomalies, shape (n_days + 1, size); row d is the value at day d 00:00."""
    out = np.empty((n_days + 1, size))
    out[0] = rng.normal(0.0, sd, size)
    innov_sd = sd * math.sqrt(1.0 - phi * phi)
    for d in range(1, n_days + 1):
        out[d] = phi * out[d - 1] + rng.normal(0.0, innov_sd, size)
    return out


def _to_steps(daily: np.ndarray, h: int) -> np.ndarray:
    """Linear interpolation of day-boundary knots onto (T, H, ...)."""
    n_days = daily.shape[0] - 1
    frac = (np.arange(h) / h)[:, None]
    return np.stack([daily[d] * (1 - frac) + daily[d + 1] * frac for d in range(n_days)])


def exp_smooth(x: np.ndarray, alpha: float, carry: Optional[float] = None) -> np.ndarray:
    """Plain scalar recursion s_k = (1 - alpha) x_k + alpha s_{k-1}; s_0 = carry or x_0."""
    flat = np.asarray(x, dtype=float).ravel()
    out = np.empty_like(flat)
    s = flat[0] if carry is None else carry
    for k, xk in enumerate(flat):
        s = (1.0 - alpha) * xk + alpha * s
        out[k] = s
    return out.reshape(np.shape(x))


def heating_response(smoothed_temp: np.ndarray) -> np.ndarray:
    return 1800.0 * np.maximum(16.0 - smoothed_temp, 0.0) + 500.0 * np.maximum(smoothed_temp - 22.0, 0.0)


def generate_synthetic(config: SyntheticConfig, seed: Optional[int] = None) -> tuple[Dataset, SyntheticTruth]:
    """Generate a seeded synthetic load/weather dataset with known ground truth."""
    c = config
    if c.t_days < 3 or c.h < 1 or c.v < 1 or c.i < 1:
        raise ValueError("synthetic dims need t_days >= 3 and h, v, i >= 1")
    if not 0.0 < c.true_alpha < 1.0:
        raise ValueError("true_alpha must lie in (0, 1)")
    if c.noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(c.seed if seed is None else seed)
    start = dt.date.fromisoformat(c.start_date)
    t, h, v, n_st = c.t_days, c.h, c.v, c.i

    day_index = np.arange(t)[:, None] + (np.arange(h) / h)[None, :]  # (T, H) fractional days
    doy = np.array([(start + dt.timedelta(days=d)).timetuple().tm_yday for d in range(t)])[:, None] + np.arange(h)[None, :] / h
    season = np.cos(2 * np.pi * (doy - 15) / 365.25)  # +1 mid-January
    diurnal = np.sin(2 * np.pi * (np.arange(h) / h - 0.375))[None, :]

    lats = rng.uniform(42.5, 50.5, n_st)
    lons = rng.uniform(-4.0, 7.5, n_st)
    stations = [StationMeta(f"S{k:02d}", f"station_{k:02d}", float(lats[k]), float(lons[k])) for k in range(n_st)]
    names = ["temperature", "wind", "radiation"][:v] + [f"var{k}" for k in range(3, v)]

    raw = np.empty((t, h, v, n_st))
    if c.constant_weather:
        raw[:] = rng.uniform(0.0, 20.0, (v, n_st))[None, None]
    else:
        for var in range(v):
            offsets = rng.normal(0.0, 1.0, n_st)
            amp = rng.uniform(0.7, 1.3, n_st)
            regional = _to_steps(_daily_ar1(rng, t, 1, 0.8, 1.0), h)[..., 0]
            local = _to_steps(_daily_ar1(rng, t, n_st, 0.7, 1.0), h)
            if var == 0:
                base = 12.0 + 2.5 * offsets + 7.0 * amp * (-season)[..., None] + 4.0 * amp * diurnal[..., None]
                raw[:, :, var] = base + 3.0 * regional[..., None] + 1.2 * local
            elif var == 1:
                base = 5.0 + 1.5 * offsets + 1.5 * season[..., None]
                raw[:, :, var] = np.abs(base + 2.0 * regional[..., None] + 1.0 * local)
            elif var == 2:
                sun = np.clip(np.sin(np.pi * (np.arange(h) / h - 0.25) / 0.5), 0.0, None)[None, :, None]
                cloud = 1.0 / (1.0 + np.exp(-(regional[..., None] + 0.5 * local)))
                raw[:, :, var] = sun * (350.0 - 150.0 * season[..., None] + 30.0 * offsets) * (0.4 + 0.6 * cloud)
            else:
                raw[:, :, var] = offsets + amp * np.sin(2 * np.pi * day_index / (7 + var))[..., None] + regional[..., None] + local

    weights = rng.gamma(2.0, 1.0, (v, n_st))
    weights = weights / weights.sum(axis=1, keepdims=True)
    weights[:, -1] = 1.0 - weights[:, :-1].sum(axis=1)  # exact unit row sums
    aggregate = np.einsum("thvi,vi->thv", raw, weights)
    smoothed = exp_smooth(aggregate[..., 0], c.true_alpha)

    holidays = _holidays_between(start, t)
    calendar = build_calendar(start, t, h, holidays)
    if c.response == "linear":
        clean = 20000.0 - 600.0 * aggregate[..., 0]
        spec = "load = 20000 - 600 * aggregated_temperature"
    elif c.response == "heating":
        cal = calendar.values
        weekday_effect = cal[..., :7] @ np.array([0.0, 600.0, 700.0, 600.0, 0.0, -4000.0, -6000.0])
        intraday = 4000.0 * np.sin(2 * np.pi * (np.arange(h) / h - 0.3))[None, :] + 1500.0 * np.cos(4 * np.pi * np.arange(h) / h)[None, :]
        holiday_effect = -5000.0 * cal[..., 20] - 1500.0 * (cal[..., 21] + cal[..., 22])
        weather_effect = heating_response(smoothed)
        if v > 1:
            weather_effect = weather_effect + 250.0 * aggregate[..., 1]
        if v > 2:
            weather_effect = weather_effect - 4.0 * aggregate[..., 2]
        clean = 50000.0 + weekday_effect + intraday + holiday_effect + weather_effect
        spec = (
            "load = 50000 + weekday + intraday + holiday + 1800*max(16 - Tbar, 0) + 500*max(Tbar - 22, 0)"
            " + 250*wind_agg - 4*radiation_agg; Tbar = exp. smoothing of aggregated temperature"
        )
    else:
        raise ValueError(f"unknown response {c.response!r}")

    n_train = int(round(c.train_frac * t))
    n_valid = int(round(c.valid_frac * t))
    train, valid, test = (0, n_train), (n_train, n_train + n_valid), (n_train + n_valid, t)
    if c.level_shift:
        clean = clean.copy()
        clean[test[0]:] *= 1.0 + c.level_shift
        spec += f"; test-period load scaled by {1.0 + c.level_shift}"
    noise = rng.normal(0.0, c.noise_sigma, (t, h)) if c.noise_sigma > 0 else np.zeros((t, h))
    load_values = clean + noise

    mask = np.zeros(t, dtype=bool)
    mask[list(c.excluded_days)] = True
    panel = WeatherPanel(raw, names, stations, start, h)
    load = LoadSeries(load_values, start, mask)
    ds = make_dataset(panel, load, calendar, train, valid, test, holidays, allow_degenerate=c.constant_weather)
    truth = SyntheticTruth(weights, c.true_alpha, spec, c.noise_sigma, clean, aggregate, smoothed, noise)
    return ds, truth


# ---------------------------------------------------------------- directory I/O


def _iso(ts: pd.Timestamp) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


def write_dataset_dir(ds: Dataset, out_dir, truth: Optional[SyntheticTruth] = None) -> None:
    """Write a dataset as weather/stations/load CSVs plus a small JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel = ds.raw_weather
    t, h, v, n_st = panel.values.shape
    start = pd.Timestamp(panel.start_date)
    stamps = [_iso(start + pd.Timedelta(seconds=k * 86400.0 / h)) for k in range(t * h)]

    with open(out / "stations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "name", "lat", "lon"])
        for s in panel.stations:
            w.writerow([s.station_id, s.name, repr(s.latitude), repr(s.longitude)])
    flat = panel.values.reshape(t * h, v, n_st)
    with open(out / "weather.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_utc", "station_id", "variable", "value"])
        for vi, var in enumerate(panel.variable_names):
            for si, s in enumerate(panel.stations):
                for k in range(t * h):
                    w.writerow([stamps[k], s.station_id, var, repr(float(flat[k, vi, si]))])
    with open(out / "load.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_utc", "load_mw"])
        for k, y in enumerate(ds.load.values.ravel()):
            w.writerow([stamps[k], repr(float(y))])
    manifest = {
        "steps_per_day": h,
        "splits": ds.splits.as_dict(),
        "holidays": [d.isoformat() for d in ds.holidays],
        "excluded_days": [int(k) for k in np.flatnonzero(ds.load.exclusion_mask)],
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2))
    if truth is not None:
        (out / "truth.json").write_text(
            json.dumps(
                {
                    "true_weights": truth.true_weights.tolist(),
                    "true_alpha": truth.true_alpha,
                    "response_spec": truth.response_spec,
                    "noise_sigma": truth.noise_sigma,
                },
                indent=2,
            )
        )


def load_dataset_dir(data_dir) -> Dataset:
    d = Path(data_dir)
    manifest = json.loads((d / "dataset.json").read_text())
    h = int(manifest["steps_per_day"])
    panel = load_weather_csv(d / "weather.csv", d / "stations.csv", h)
    load = load_load_csv(d / "load.csv")
    if load.values.shape[1] != h:
        raise IngestionError(f"load cadence gives H={load.values.shape[1]}, manifest says {h}")
    if panel.start_date != load.start_date or panel.n_days != load.values.shape[0]:
        raise IngestionError("weather and load cover different days")
    mask = np.zeros(load.values.shape[0], dtype=bool)
    mask[manifest.get("excluded_days", [])] = True
    load = LoadSeries(load.values, load.start_date, mask)
    holidays = [dt.date.fromisoformat(x) for x in manifest.get("holidays", [])]
    calendar = build_calendar(load.start_date, load.values.shape[0], h, holidays)
    s = manifest["splits"]
    return make_dataset(panel, load, calendar, tuple(s["train"]), tuple(s["valid"]), tuple(s["test"]), holidays)

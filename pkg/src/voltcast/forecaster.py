"""Daily forecasting network: weather modeling module, two layer graphs and a linear head."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .data import Dataset, DayRange, iter_batches
from .weather_layers import (
    DTYPE,
    ExpSmoothingLayer,
    PonderationLayer,
    RecurrentSmoothingLayer,
    init_ponderation,
)

log = logging.getLogger(__name__)

LAYER_KINDS = ("dense_over_features", "temporal_convolution", "identity")
ACTIVATIONS = ("identity", "relu", "sigmoid")
SMOOTHING_KINDS = ("es", "vanilla_rnn", "lstm", "gru")


class NumericError(ArithmeticError):
    pass


class TrainingError(NumericError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_dim: int = 1
    kernel: int = 1
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.out_dim < 1:
            raise ValueError("out_dim must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd and >= 1")


@dataclass(frozen=True)
class NetworkGraph:
    """A DAG of layers. ``edges[k]`` lists the predecessors of node k; -1 is the
    graph input. Each node consumes the feature-axis concatenation of its
    predecessors, and the last node is the single sink."""

    nodes: tuple = ()
    edges: tuple = ()
    stage: str = "gamma1_2d"

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(tuple(int(p) for p in e) for e in self.edges))
        if self.stage not in ("gamma1_2d", "gamma2_1d"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if len(self.edges) != len(self.nodes):
            raise ValueError("one predecessor list per node is required")
        consumed = set()
        for k, preds in enumerate(self.edges):
            if not preds:
                raise ValueError(f"node {k} has no inputs")
            if any(p < -1 or p >= k for p in preds):
                raise ValueError(f"node {k} has a predecessor out of topological order: {preds}")
            consumed.update(preds)
        dangling = [k for k in range(len(self.nodes) - 1) if k not in consumed]
        if dangling:
            raise ValueError(f"graph must have a single sink; nodes {dangling} feed nothing")
        if self.stage == "gamma2_1d" and any(n.kind == "temporal_convolution" for n in self.nodes):
            raise ValueError("temporal convolutions are only available in the 2-D stage")

    @classmethod
    def chain(cls, specs, stage: str = "gamma1_2d") -> "NetworkGraph":
        specs = tuple(specs)
        return cls(specs, tuple((k - 1,) for k in range(len(specs))), stage)

    def to_dict(self) -> dict:
        return {"nodes": [asdict(n) for n in self.nodes], "edges": [list(e) for e in self.edges], "stage": self.stage}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkGraph":
        return cls(tuple(LayerSpec(**n) for n in d["nodes"]), tuple(tuple(e) for e in d["edges"]), d["stage"])


@dataclass(frozen=True)
class ModelDims:
    h: int
    v: int
    i: int
    f: int

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "ModelDims":
        return cls(ds.steps_per_day, ds.n_variables, ds.n_stations, ds.n_calendar)


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 50
    batch_size: int = 7
    seed: int = 0
    gradient_clip: Optional[float] = 10.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


_ACT = {"identity": lambda z: z, "relu": torch.relu, "sigmoid": torch.sigmoid}


def _uniform_(t: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)


class GraphNet(nn.Module):
    """Executes a NetworkGraph on (B, H, d) tensors.

    In the 2-D stage dense layers act per instant and convolutions slide over
    the instants. In the 1-D stage the (H, d) block is treated as one flat
    vector of width H*d, so a dense layer with ``out_dim`` k maps H*d -> H*k.
    """

    def __init__(self, graph: NetworkGraph, in_dim: int, h: int, gen: torch.Generator):
        super().__init__()
        self.graph = graph
        self.h = h
        widths = {-1: in_dim}
        layers = []
        for k, (spec, preds) in enumerate(zip(graph.nodes, graph.edges)):
            d = sum(widths[p] for p in preds)
            if spec.kind == "identity":
                layers.append(nn.Identity())
                widths[k] = d
                continue
            if spec.kind == "temporal_convolution":
                layer = nn.Conv1d(d, spec.out_dim, spec.kernel, padding=spec.kernel // 2, dtype=DTYPE)
                fan_in = d * spec.kernel
            elif graph.stage == "gamma1_2d":
                layer = nn.Linear(d, spec.out_dim, dtype=DTYPE)
                fan_in = d
            else:
                layer = nn.Linear(h * d, h * spec.out_dim, dtype=DTYPE)
                fan_in = h * d
            _uniform_(layer.weight, fan_in, gen)
            _uniform_(layer.bias, fan_in, gen)
            layers.append(layer)
            widths[k] = spec.out_dim
        self.layers = nn.ModuleList(layers)
        self.out_dim = widths[len(graph.nodes) - 1] if graph.nodes else in_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.graph.nodes:
            return x
        outs = {-1: x}
        b = x.shape[0]
        for k, (spec, preds, layer) in enumerate(zip(self.graph.nodes, self.graph.edges, self.layers)):
            z = torch.cat([outs[p] for p in preds], dim=-1) if len(preds) > 1 else outs[preds[0]]
            if spec.kind == "temporal_convolution":
                z = layer(z.transpose(1, 2)).transpose(1, 2)
            elif spec.kind == "dense_over_features" and self.graph.stage == "gamma2_1d":
                z = layer(z.reshape(b, -1)).reshape(b, self.h, spec.out_dim)
            else:
                z = layer(z)
            z = _ACT[spec.activation](z)
            if not torch.isfinite(z).all():
                raise NumericError(f"non-finite output in {self.graph.stage} node {k} ({spec.kind})")
            outs[k] = z
        return outs[len(self.graph.nodes) - 1]


class WeatherModelingModule(nn.Module):
    """One ponderation layer per variable, then smoothing of the temperature channels.

    Output per instant: the F_W aggregated channels followed by the F_T smoothed
    temperature channels. Variable 0 is temperature.
    """

    def __init__(self, ponderations: list[PonderationLayer], smoothing: nn.Module, temperature_channels):
        super().__init__()
        self.ponderations = nn.ModuleList(ponderations)
        self.smoothing = smoothing
        self.temperature_channels = list(temperature_channels)
        if any(c < 0 or c >= ponderations[0].out_dim for c in self.temperature_channels):
            raise ValueError("temperature channels must index the temperature ponderation outputs")

    @property
    def f_w(self) -> int:
        return sum(p.out_dim for p in self.ponderations)

    @property
    def out_dim(self) -> int:
        return self.f_w + len(self.temperature_channels)

    def parts(self, w_b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if w_b.ndim != 4 or w_b.shape[2] != len(self.ponderations):
            raise ValueError(f"weather input must be (B, H, {len(self.ponderations)}, I), got {tuple(w_b.shape)}")
        aggregated = [p(w_b[:, :, v, :]) for v, p in enumerate(self.ponderations)]
        smoothed = self.smoothing(aggregated[0][..., self.temperature_channels])
        return torch.cat(aggregated, dim=-1), smoothed

    def forward(self, w_b: torch.Tensor) -> torch.Tensor:
        return torch.cat(self.parts(w_b), dim=-1)

    def reset_carry(self) -> None:
        self.smoothing.reset_carry()


def weather_module_forward(module: WeatherModelingModule, w_b) -> torch.Tensor:
    return module(torch.as_tensor(np.asarray(w_b, dtype=float), dtype=DTYPE))


class ForecastModel(nn.Module):
    def __init__(self, weather: WeatherModelingModule, gamma1: GraphNet, gamma2: GraphNet, dims: ModelDims,
                 gen: torch.Generator, candidate=None, seed: int = 0):
        super().__init__()
        self.weather = weather
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.dims = dims
        self.candidate = candidate
        self.seed = seed
        self.trained = False
        d = gamma2.out_dim
        self.a_f = nn.Parameter(torch.empty(d, dtype=DTYPE))
        self.b_f = nn.Parameter(torch.zeros((), dtype=DTYPE))
        _uniform_(self.a_f, d, gen)
        _uniform_(self.b_f, d, gen)

    @property
    def hidden_dim(self) -> int:
        return self.a_f.shape[0]

    def reset_carry(self) -> None:
        self.weather.reset_carry()

    def forward(self, w_b: torch.Tensor, c_b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        modeled = self.weather(w_b)
        if not torch.isfinite(modeled).all():
            raise NumericError("non-finite output in weather modeling module")
        x = torch.cat([modeled, c_b], dim=-1)
        hidden = self.gamma2(self.gamma1(x))
        y = hidden @ self.a_f + self.b_f
        if not torch.isfinite(y).all():
            raise NumericError("non-finite output in final linear layer")
        return y, hidden


def _smoothing_layer(kind: str, activation: str, h: int, channels: int, seed: int) -> nn.Module:
    if kind == "es":
        return ExpSmoothingLayer(channels)
    cell = {"vanilla_rnn": "vanilla", "lstm": "lstm", "gru": "gru"}.get(kind)
    if cell is None:
        raise ValueError(f"unknown smoothing kind {kind!r}")
    return RecurrentSmoothingLayer(cell, h, channels, activation=activation, seed=seed)


def assemble_model(candidate, dims: ModelDims, seed: Optional[int] = None) -> ForecastModel:
    """Build the model a candidate describes; the seed defaults to the candidate id."""
    seed = candidate.id if seed is None else seed
    f_v = tuple(candidate.f_v)
    if len(f_v) != dims.v:
        raise ValueError(f"candidate has {len(f_v)} ponderation widths for {dims.v} variables")
    if any(f < 1 for f in f_v):
        raise ValueError("ponderation widths must be >= 1")
    if candidate.gamma1.stage != "gamma1_2d" or candidate.gamma2.stage != "gamma2_1d":
        raise ValueError("gamma1 must be a 2-D graph and gamma2 a 1-D graph")
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=dims.v + 2)
    ponds = [init_ponderation(dims.i, f, int(seeds[v]), variable_index=v) for v, f in enumerate(f_v)]
    smoothing = _smoothing_layer(candidate.smoothing_kind, candidate.smoothing_activation, dims.h, f_v[0], int(seeds[dims.v]))
    weather = WeatherModelingModule(ponds, smoothing, range(f_v[0]))
    gen = torch.Generator().manual_seed(int(seeds[dims.v + 1]))
    gamma1 = GraphNet(candidate.gamma1, weather.out_dim + dims.f, dims.h, gen)
    gamma2 = GraphNet(candidate.gamma2, gamma1.out_dim, dims.h, gen)
    return ForecastModel(weather, gamma1, gamma2, dims, gen, candidate=candidate, seed=seed)


def _inputs(ds: Dataset, days) -> tuple[torch.Tensor, torch.Tensor]:
    return (
        torch.as_tensor(ds.weather.values[days], dtype=DTYPE),
        torch.as_tensor(ds.calendar.values[days], dtype=DTYPE),
    )


def model_forward(model: ForecastModel, w_b, c_b) -> tuple[torch.Tensor, torch.Tensor]:
    w = torch.as_tensor(np.asarray(w_b, dtype=float), dtype=DTYPE)
    c = torch.as_tensor(np.asarray(c_b, dtype=float), dtype=DTYPE)
    if not (torch.isfinite(w).all() and torch.isfinite(c).all()):
        raise NumericError("non-finite model input")
    return model(w, c)


def train_model(model: ForecastModel, ds: Dataset, cfg: TrainConfig) -> tuple[ForecastModel, list[float]]:
    """Plain gradient descent on the scaled-load MSE over chronological batches.

    The smoothing carry is reset at the start of every epoch. Returns the model
    (trained in place) and the per-epoch training MSE.
    """
    a, b = ds.splits.train
    if b <= a:
        raise ValueError("empty training split")
    torch.manual_seed(cfg.seed)
    target = torch.as_tensor(ds.scaled_load, dtype=DTYPE)
    params = [p for p in model.parameters() if p.requires_grad]
    curve = []
    model.train()
    for epoch in range(cfg.epochs):
        model.reset_carry()
        sse, count = 0.0, 0
        for batch in iter_batches(ds, ds.splits.train, cfg.batch_size):
            w, c = _inputs(ds, batch.days)
            try:
                y_hat, _ = model(w, c)
            except (NumericError, ValueError) as exc:
                raise TrainingError(epoch, str(exc)) from exc
            if len(batch.loss_days) == 0:
                continue
            keep = torch.as_tensor(np.isin(batch.days, batch.loss_days))
            err = y_hat[keep] - target[batch.loss_days]
            loss = (err**2).mean()
            if not torch.isfinite(loss):
                raise TrainingError(epoch, "loss is not finite")
            for p in params:
                p.grad = None
            loss.backward()
            with torch.no_grad():
                if cfg.gradient_clip is not None:
                    nn.utils.clip_grad_norm_(params, cfg.gradient_clip)
                for p in params:
                    if p.grad is not None:
                        p -= cfg.learning_rate * p.grad
            sse += float(loss.detach()) * err.numel()
            count += err.numel()
        epoch_mse = sse / max(count, 1)
        if not np.isfinite(epoch_mse) or any(not torch.isfinite(p).all() for p in params):
            raise TrainingError(epoch, "parameters diverged")
        curve.append(epoch_mse)
        log.debug("epoch %d mse %.6g", epoch, epoch_mse)
    model.reset_carry()
    model.trained = True
    return model, curve


class Prediction(NamedTuple):
    forecasts: np.ndarray  # (days, H) MW
    hidden: np.ndarray  # (days, H, D)
    scaled: np.ndarray  # (days, H) scaled load space
    days: np.ndarray


def predict(model: ForecastModel, ds: Dataset, day_range: DayRange, chunk: int = 32) -> Prediction:
    """Forecast a day range, threading the smoothing carry from the start of training."""
    a, b = day_range
    start = ds.splits.train[0]
    if a < start:
        raise ValueError(f"range {day_range} starts before the training period (day {start}); carry undefined")
    if not (a < b <= ds.n_days):
        raise ValueError(f"range {day_range} outside the dataset")
    model.eval()
    model.reset_carry()
    ys, hs = [], []
    with torch.no_grad():
        for lo in range(start, b, chunk):
            days = np.arange(lo, min(lo + chunk, b))
            y, h = model(*_inputs(ds, days))
            keep = days >= a
            ys.append(y.numpy()[keep])
            hs.append(h.numpy()[keep])
    model.reset_carry()
    model.train()
    scaled = np.concatenate(ys)
    return Prediction(ds.scaler.unscale_load(scaled), np.concatenate(hs), scaled, np.arange(a, b))


# ---------------------------------------------------------------- serialization


def model_to_dict(model: ForecastModel, ds: Optional[Dataset] = None, train_cfg: Optional[TrainConfig] = None,
                  loss_curve: Optional[list] = None) -> dict:
    doc = {
        "candidate": model.candidate.to_dict(),
        "dims": asdict(model.dims),
        "seed": model.seed,
        "trained": model.trained,
        "parameters": {k: v.detach().numpy().tolist() for k, v in model.state_dict().items() if k != "weather.smoothing.carry"},
    }
    if ds is not None:
        doc["scaler"] = ds.scaler.to_dict()
    if train_cfg is not None:
        doc["train_config"] = asdict(train_cfg)
    if loss_curve is not None:
        doc["loss_curve"] = list(loss_curve)
    return doc


def model_from_dict(doc: dict) -> ForecastModel:
    from .search import Candidate

    candidate = Candidate.from_dict(doc["candidate"])
    model = assemble_model(candidate, ModelDims(**doc["dims"]), seed=doc["seed"])
    state = {k: torch.as_tensor(np.asarray(v, dtype=float), dtype=DTYPE) for k, v in doc["parameters"].items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    missing = [k for k in missing if k != "weather.smoothing.carry"]
    if missing or unexpected:
        raise ValueError(f"model document does not match architecture: missing {missing}, unexpected {unexpected}")
    model.trained = bool(doc.get("trained", False))
    return model


def save_model(model: ForecastModel, path, **extra) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, **extra)))


def load_model(path) -> ForecastModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def write_forecast_csv(path, ds: Dataset, days, forecasts, static=None) -> None:
    header = ["date", "instant", "forecast_mw"] + (["static_forecast_mw"] if static is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, day in enumerate(days):
            date = ds.date_of(int(day)).isoformat()
            for h in range(forecasts.shape[1]):
                row = [date, h, repr(float(forecasts[k, h]))]
                if static is not None:
                    row.append(repr(float(static[k, h])))
                w.writerow(row)

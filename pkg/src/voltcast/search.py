"""Steady-state evolutionary search over architecture and hyperparameters.

A candidate is trained by gradient descent on the training split and scored by
the MSE of its Kalman-recalibrated forecasts on the validation split.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .data import Dataset
from .forecaster import (
    SMOOTHING_KINDS,
    LayerSpec,
    ModelDims,
    NetworkGraph,
    NumericError,
    TrainConfig,
    assemble_model,
    predict,
    train_model,
)
from .kalman import KalmanConfig, KalmanError, run_online
from .metrics import compute_mape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GraphMenu:
    """Layer choices and depth bounds for one graph stage.

    Sampled graphs are chains; with ``allow_skip`` each node after the first
    may also read the graph input directly.
    """

    layers: tuple = (LayerSpec("identity"),)
    min_depth: int = 0
    max_depth: int = 1
    allow_skip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("graph menu needs at least one layer choice")
        if not 0 <= self.min_depth <= self.max_depth:
            raise ValueError("depth bounds must satisfy 0 <= min_depth <= max_depth")

    def build(self, layer_idx: Sequence[int], skips: Sequence[bool], stage: str) -> NetworkGraph:
        nodes = tuple(self.layers[k] for k in layer_idx)
        edges = tuple(((k - 1, -1) if (k > 0 and skips[k]) else (k - 1,)) for k in range(len(nodes)))
        return NetworkGraph(nodes, edges, stage)

    def sample(self, rng: np.random.Generator, stage: str) -> NetworkGraph:
        depth = int(rng.integers(self.min_depth, self.max_depth + 1))
        idx = [int(rng.integers(len(self.layers))) for _ in range(depth)]
        skips = [bool(self.allow_skip and k > 0 and rng.random() < 0.5) for k in range(depth)]
        return self.build(idx, skips, stage)

    def enumerate(self, stage: str) -> list[NetworkGraph]:
        out = []
        for depth in range(self.min_depth, self.max_depth + 1):
            skip_opts = [(False,)] + [((False, True) if self.allow_skip else (False,))] * max(depth - 1, 0)
            for idx in itertools.product(range(len(self.layers)), repeat=depth):
                for skips in itertools.product(*skip_opts[:depth]) if depth else [()]:
                    out.append(self.build(idx, skips, stage))
        return out

    def to_dict(self) -> dict:
        return {
            "layers": [dataclasses.asdict(s) for s in self.layers],
            "min_depth": self.min_depth,
            "max_depth": self.max_depth,
            "allow_skip": self.allow_skip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraphMenu":
        return cls(tuple(LayerSpec(**s) for s in d["layers"]), d.get("min_depth", 0), d.get("max_depth", 1), d.get("allow_skip", False))


@dataclass
class SearchSpace:
    f_v_choices: list
    smoothing_kinds: list = field(default_factory=lambda: list(SMOOTHING_KINDS))
    smoothing_activations: list = field(default_factory=lambda: ["tanh"])
    gamma1_menu: GraphMenu = field(default_factory=GraphMenu)
    gamma2_menu: GraphMenu = field(default_factory=GraphMenu)
    lr_choices: list = field(default_factory=lambda: [0.05])
    epoch_choices: list = field(default_factory=lambda: [20])
    batch_size_choices: list = field(default_factory=lambda: [7])
    # log-uniform intervals; a degenerate interval (lo == hi) pins the value
    sigma2_range: tuple = (1e-4, 1e-1)
    q_scale_range: tuple = (1e-7, 1e-3)
    # optional finite grids that replace the intervals (enumerable spaces)
    sigma2_choices: Optional[list] = None
    q_scale_choices: Optional[list] = None
    p0: float = 1.0
    delay_days: int = 2

    def __post_init__(self):
        self.f_v_choices = [list(c) for c in self.f_v_choices]
        if not self.f_v_choices or any(not c or min(c) < 1 for c in self.f_v_choices):
            raise ValueError("every variable needs a nonempty set of widths >= 1")
        for name in ("smoothing_kinds", "smoothing_activations", "lr_choices", "epoch_choices", "batch_size_choices"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        if set(self.smoothing_kinds) - set(SMOOTHING_KINDS):
            raise ValueError(f"unknown smoothing kinds {set(self.smoothing_kinds) - set(SMOOTHING_KINDS)}")
        for lo, hi in (self.sigma2_range, self.q_scale_range):
            if not 0 < lo <= hi:
                raise ValueError("log-uniform ranges need 0 < lo <= hi")

    @property
    def n_variables(self) -> int:
        return len(self.f_v_choices)

    def gene_names(self) -> list[str]:
        return [f"f_v{k}" for k in range(self.n_variables)] + [
            "smoothing_kind", "smoothing_activation", "gamma1", "gamma2",
            "learning_rate", "epochs", "batch_size", "sigma2", "q_scale",
        ]

    def finite_options(self, gene: str) -> Optional[list]:
        """All values of a gene, or None for a continuous gene."""
        if gene.startswith("f_v"):
            return list(self.f_v_choices[int(gene[3:])])
        table = {
            "smoothing_kind": self.smoothing_kinds,
            "smoothing_activation": self.smoothing_activations,
            "learning_rate": self.lr_choices,
            "epochs": self.epoch_choices,
            "batch_size": self.batch_size_choices,
        }
        if gene in table:
            return list(table[gene])
        if gene == "gamma1":
            return self.gamma1_menu.enumerate("gamma1_2d")
        if gene == "gamma2":
            return self.gamma2_menu.enumerate("gamma2_1d")
        grid = {"sigma2": (self.sigma2_choices, self.sigma2_range), "q_scale": (self.q_scale_choices, self.q_scale_range)}[gene]
        if grid[0] is not None:
            return list(grid[0])
        lo, hi = grid[1]
        return [lo] if lo == hi else None

    def sample_gene(self, gene: str, rng: np.random.Generator):
        if gene == "gamma1":
            return self.gamma1_menu.sample(rng, "gamma1_2d")
        if gene == "gamma2":
            return self.gamma2_menu.sample(rng, "gamma2_1d")
        opts = self.finite_options(gene)
        if opts is not None:
            return opts[int(rng.integers(len(opts)))]
        lo, hi = self.sigma2_range if gene == "sigma2" else self.q_scale_range
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))

    def n_options(self, gene: str) -> float:
        opts = self.finite_options(gene)
        return math.inf if opts is None else len(opts)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gamma1_menu"] = self.gamma1_menu.to_dict()
        d["gamma2_menu"] = self.gamma2_menu.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        d = dict(d)
        for key in ("gamma1_menu", "gamma2_menu"):
            if key in d:
                d[key] = GraphMenu.from_dict(d[key])
        for key in ("sigma2_range", "q_scale_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SearchSpace":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class Candidate:
    f_v: tuple
    smoothing_kind: str = "es"
    smoothing_activation: str = "tanh"
    gamma1: NetworkGraph = NetworkGraph(stage="gamma1_2d")
    gamma2: NetworkGraph = NetworkGraph(stage="gamma2_1d")
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 7
    sigma2: float = 1e-2
    q_scale: float = 1e-5
    p0: float = 1.0
    delay_days: int = 2
    id: int = 0
    lineage: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "f_v", tuple(int(f) for f in self.f_v))
        object.__setattr__(self, "lineage", tuple(int(x) for x in self.lineage))

    def gene(self, name: str):
        if name.startswith("f_v"):
            return self.f_v[int(name[3:])]
        return getattr(self, name)

    def genes(self) -> dict:
        names = [f"f_v{k}" for k in range(len(self.f_v))] + [
            "smoothing_kind", "smoothing_activation", "gamma1", "gamma2",
            "learning_rate", "epochs", "batch_size", "sigma2", "q_scale",
        ]
        return {n: self.gene(n) for n in names}

    def with_genes(self, genes: dict, **kw) -> "Candidate":
        f_v = list(self.f_v)
        other = {}
        for name, value in genes.items():
            if name.startswith("f_v"):
                f_v[int(name[3:])] = value
            else:
                other[name] = value
        return dataclasses.replace(self, f_v=tuple(f_v), **other, **kw)

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.id if seed is None else seed)

    def kalman_config(self) -> KalmanConfig:
        return KalmanConfig(sigma2=self.sigma2, q_diag=self.q_scale, p0=self.p0, delay_days=self.delay_days)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["f_v"] = list(self.f_v)
        d["gamma1"] = self.gamma1.to_dict()
        d["gamma2"] = self.gamma2.to_dict()
        d["lineage"] = list(self.lineage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        d = dict(d)
        d["gamma1"] = NetworkGraph.from_dict(d["gamma1"]) if "gamma1" in d else NetworkGraph(stage="gamma1_2d")
        d["gamma2"] = NetworkGraph.from_dict(d["gamma2"]) if "gamma2" in d else NetworkGraph(stage="gamma2_1d")
        return cls(**d)


@dataclass
class EvalResult:
    candidate_id: int
    validation_mse: float
    validation_mape_mw: float
    train_seconds: float
    smoothing_kind: str
    failed: bool = False
    error: str = ""
    candidate: Optional[Candidate] = None

    @property
    def objective(self) -> float:
        return math.inf if self.failed else self.validation_mse

    def to_json(self, timings: bool = False) -> str:
        """One JSONL record. Wall-clock time is left out unless asked for, so
        reruns produce identical files."""
        rec = {
            "candidate_id": self.candidate_id,
            "validation_mse": _num(self.validation_mse),
            "validation_mape_mw": _num(self.validation_mape_mw),
            "smoothing_kind": self.smoothing_kind,
            "failed": self.failed,
            "error": self.error,
            "genes": self.candidate.to_dict() if self.candidate is not None else None,
        }
        if timings:
            rec["train_seconds"] = self.train_seconds
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line: str) -> "EvalResult":
        rec = json.loads(line)
        cand = Candidate.from_dict(rec["genes"]) if rec.get("genes") else None
        return cls(
            rec["candidate_id"], float(rec["validation_mse"]), float(rec["validation_mape_mw"]),
            float(rec.get("train_seconds", 0.0)), rec["smoothing_kind"], rec["failed"], rec.get("error", ""), cand,
        )


def _num(x: float):
    return x if math.isfinite(x) else str(x)


@dataclass
class EAConfig:
    population_size: int = 16
    tournament_size: int = 2
    mutation_rate: float = 0.3
    budget_evaluations: int = 64
    seed: int = 0
    workers: int = 1
    # children bred from one population snapshot before their replacements are
    # applied; parallel evaluation happens within such a group
    offspring_batch: int = 4

    def __post_init__(self):
        if not 2 <= self.tournament_size <= self.population_size:
            raise ValueError("need 2 <= tournament_size <= population_size")
        if not 0 < self.mutation_rate <= 1:
            raise ValueError("mutation_rate must be in (0, 1]")
        if self.budget_evaluations < self.population_size:
            raise ValueError("budget must be >= population size")
        if self.workers < 1 or self.offspring_batch < 1:
            raise ValueError("workers and offspring_batch must be >= 1")


# ---------------------------------------------------------------- operators


def sample_candidate(space: SearchSpace, rng: np.random.Generator, new_id: int = 0) -> Candidate:
    genes = {g: space.sample_gene(g, rng) for g in space.gene_names()}
    base = Candidate(f_v=(1,) * space.n_variables, p0=space.p0, delay_days=space.delay_days, id=new_id)
    return base.with_genes(genes)


def enumerate_space(space: SearchSpace) -> list[Candidate]:
    """Every candidate of a fully finite space, in a fixed order."""
    names = space.gene_names()
    options = [space.finite_options(g) for g in names]
    if any(o is None for o in options):
        raise ValueError("space has continuous genes; it cannot be enumerated")
    base = Candidate(f_v=(1,) * space.n_variables, p0=space.p0, delay_days=space.delay_days)
    return [base.with_genes(dict(zip(names, combo)), id=k) for k, combo in enumerate(itertools.product(*options))]


def _resample_different(space: SearchSpace, gene: str, current, rng: np.random.Generator):
    if space.n_options(gene) <= 1:
        return current
    while True:
        value = space.sample_gene(gene, rng)
        if value != current:
            return value


def mutate(candidate: Candidate, space: SearchSpace, rng: np.random.Generator, rate: float = 0.3,
           new_id: Optional[int] = None) -> Candidate:
    """Resample each gene with probability ``rate``; at least one gene changes
    whenever some gene has more than one possible value."""
    names = space.gene_names()
    chosen = [g for g in names if rng.random() < rate]
    mutable = [g for g in names if space.n_options(g) > 1]
    if mutable and not any(g in mutable for g in chosen):
        chosen.append(mutable[int(rng.integers(len(mutable)))])
    genes = {g: _resample_different(space, g, candidate.gene(g), rng) for g in chosen}
    return candidate.with_genes(genes, id=candidate.id if new_id is None else new_id, lineage=(candidate.id,))


def crossover(a: Candidate, b: Candidate, rng: np.random.Generator, new_id: Optional[int] = None) -> Candidate:
    """Uniform crossover: each gene comes from either parent with probability 1/2."""
    ga, gb = a.genes(), b.genes()
    if ga.keys() != gb.keys():
        raise ValueError("parents come from different spaces")
    genes = {k: (ga[k] if rng.random() < 0.5 else gb[k]) for k in ga}
    return a.with_genes(genes, id=a.id if new_id is None else new_id, lineage=(a.id, b.id))


# ---------------------------------------------------------------- evaluation


@contextmanager
def _single_thread():
    # thread count can change reduction order; keep evaluations reproducible
    before = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(before)


def evaluate_candidate(candidate: Candidate, ds: Dataset) -> EvalResult:
    """Train on the training split, recalibrate over the validation split and score."""
    start = time.perf_counter()
    kind = candidate.smoothing_kind
    try:
        with _single_thread():
            model = assemble_model(candidate, ModelDims.from_dataset(ds))
            train_model(model, ds, candidate.train_config())
            recal = run_online(model, ds, ds.splits.valid, candidate.kalman_config())
        a, b = ds.splits.valid
        keep = ~ds.load.exclusion_mask[a:b]
        mse = float(np.mean((recal.scaled[keep] - ds.scaled_load[a:b][keep]) ** 2))
        mape = compute_mape(ds.load.values[a:b][keep].ravel(), recal.forecasts[keep].ravel())
        if not (math.isfinite(mse) and math.isfinite(mape)):
            raise NumericError("non-finite validation score")
    except (NumericError, KalmanError, FloatingPointError) as exc:
        log.info("candidate %d failed: %s", candidate.id, exc)
        return EvalResult(candidate.id, math.inf, math.inf, time.perf_counter() - start, kind, True, str(exc), candidate)
    return EvalResult(candidate.id, mse, mape, time.perf_counter() - start, kind, False, "", candidate)


_WORKER_DS: Optional[Dataset] = None


def _worker_init(ds: Dataset) -> None:
    global _WORKER_DS
    _WORKER_DS = ds
    torch.set_num_threads(1)


def _worker_eval(candidate: Candidate) -> EvalResult:
    return evaluate_candidate(candidate, _WORKER_DS)


class _Evaluator:
    def __init__(self, ds: Dataset, workers: int):
        self.ds = ds
        self.pool = None
        if workers > 1:
            ctx = multiprocessing.get_context("spawn")
            self.pool = ProcessPoolExecutor(workers, mp_context=ctx, initializer=_worker_init, initargs=(ds,))

    def __call__(self, candidates: list[Candidate]) -> list[EvalResult]:
        if self.pool is None:
            return [evaluate_candidate(c, self.ds) for c in candidates]
        return list(self.pool.map(_worker_eval, candidates))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _tournament(population: list[EvalResult], size: int, rng: np.random.Generator) -> EvalResult:
    picks = rng.choice(len(population), size=size, replace=False)
    return min((population[k] for k in picks), key=lambda r: (r.objective, r.candidate_id))


def _worst_index(population: list[EvalResult]) -> int:
    return max(range(len(population)), key=lambda k: (population[k].objective, population[k].candidate_id))


@dataclass
class SearchRun:
    best: Candidate
    history: list
    population_sizes: list  # population size after every replacement step
    worst_objectives: list  # population's worst objective after every step


def run_search_detailed(space: SearchSpace, cfg: EAConfig, ds: Dataset) -> SearchRun:
    rng = np.random.default_rng(cfg.seed)
    evaluate = _Evaluator(ds, cfg.workers)
    try:
        initial = [sample_candidate(space, rng, new_id=k) for k in range(cfg.population_size)]
        population = evaluate(initial)
        history = list(population)
        sizes, worsts = [], []
        next_id = cfg.population_size
        while len(history) < cfg.budget_evaluations:
            n_children = min(cfg.offspring_batch, cfg.budget_evaluations - len(history))
            children = []
            for _ in range(n_children):
                pa = _tournament(population, cfg.tournament_size, rng).candidate
                pb = _tournament(population, cfg.tournament_size, rng).candidate
                child = crossover(pa, pb, rng, new_id=next_id)
                child = mutate(child, space, rng, cfg.mutation_rate, new_id=next_id)
                children.append(dataclasses.replace(child, lineage=(pa.id, pb.id)))
                next_id += 1
            for res in evaluate(children):
                history.append(res)
                worst = _worst_index(population)
                if res.objective < population[worst].objective:
                    population[worst] = res
                sizes.append(len(population))
                worsts.append(population[_worst_index(population)].objective)
            log.info("evaluated %d/%d, best mse %.6g", len(history), cfg.budget_evaluations,
                     min(r.objective for r in history))
    finally:
        evaluate.close()
    best = min(history, key=lambda r: (r.objective, r.candidate_id))
    return SearchRun(best.candidate, history, sizes, worsts)


def run_search(space: SearchSpace, cfg: EAConfig, ds: Dataset) -> tuple[Candidate, list[EvalResult]]:
    run = run_search_detailed(space, cfg, ds)
    return run.best, run.history


def best_so_far(history: Sequence[EvalResult]) -> np.ndarray:
    return np.minimum.accumulate(np.array([r.objective for r in history]))


# ---------------------------------------------------------------- smoothing-kind telemetry


@dataclass
class KindCounts:
    kinds: list
    cumulative: dict  # kind -> (n,) counts among candidates 0..k
    windowed: dict  # kind -> (n,) counts among the trailing ``window`` candidates
    window: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["creation_index", "kind", "count"])
            n = len(next(iter(self.cumulative.values())))
            for k in range(n):
                for kind in self.kinds:
                    w.writerow([k, kind, int(self.cumulative[kind][k])])


def smoothing_kind_history(history: Sequence[EvalResult], window: int = 25, kinds: Sequence[str] = SMOOTHING_KINDS) -> KindCounts:
    if not history:
        raise ValueError("history is empty")
    labels = np.array([r.smoothing_kind for r in history])
    kinds = list(kinds)
    cumulative, windowed = {}, {}
    for kind in kinds:
        hit = (labels == kind).astype(int)
        cum = np.cumsum(hit)
        cumulative[kind] = cum
        lagged = np.concatenate([np.zeros(window, dtype=int), cum])[: len(cum)]
        windowed[kind] = cum - lagged
    return KindCounts(kinds, cumulative, windowed, window)


def read_kind_counts_csv(path) -> dict:
    """Read a ``creation_index,kind,count`` file back into kind -> counts arrays."""
    rows: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["creation_index", "kind", "count"]:
            raise ValueError(f"{path}: expected header creation_index,kind,count")
        for rec in reader:
            rows.setdefault(rec["kind"], []).append((int(rec["creation_index"]), int(rec["count"])))
    return {k: np.array([c for _, c in sorted(v)]) for k, v in rows.items()}


def write_history(history: Sequence[EvalResult], path, timings: bool = False) -> None:
    with open(path, "w") as fh:
        for r in sorted(history, key=lambda r: r.candidate_id):
            fh.write(r.to_json(timings) + "\n")


def read_history(path) -> list[EvalResult]:
    with open(path) as fh:
        return [EvalResult.from_json(line) for line in fh if line.strip()]

#!/usr/bin/env python3
"""Search-telemetry analogue of the smoothing-kind figure.

Runs the steady-state search on the synthetic benchmark with all four
smoothing kinds available and reports how the share of ES candidates evolves
from the initial population to the last quarter of created candidates.
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from voltcast.data import SyntheticConfig, generate_synthetic
from voltcast.forecaster import LayerSpec
from voltcast.search import EAConfig, GraphMenu, SearchSpace, run_search, smoothing_kind_history, write_history


def default_space() -> SearchSpace:
    return SearchSpace(
        f_v_choices=[[1, 2, 3], [1, 2], [1, 2]],
        smoothing_kinds=["es", "vanilla_rnn", "lstm", "gru"],
        smoothing_activations=["tanh", "identity"],
        gamma1_menu=GraphMenu((LayerSpec("dense_over_features", 8, activation="relu"), LayerSpec("temporal_convolution", 4, kernel=3)), 0, 1),
        gamma2_menu=GraphMenu((LayerSpec("dense_over_features", 4), LayerSpec("identity")), 0, 1),
        lr_choices=[0.02, 0.05],
        epoch_choices=[20, 40],
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--days", type=int, default=240)
    ap.add_argument("--h", type=int, default=24)
    ap.add_argument("--pop", type=int, default=16)
    ap.add_argument("--budget", type=int, default=64)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--space", default=None, help="search space JSON (default: built-in menu)")
    ap.add_argument("--out", default="runs/fig2")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    ds, _ = generate_synthetic(SyntheticConfig(t_days=args.days, h=args.h, seed=args.seed))
    space = SearchSpace.from_json(args.space) if args.space else default_space()
    best, history = run_search(space, EAConfig(population_size=args.pop, budget_evaluations=args.budget,
                                               workers=args.workers, seed=args.seed), ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_history(history, out / "history.jsonl")
    counts = smoothing_kind_history(history)
    counts.to_csv(out / "smoothing_kinds.csv")

    kinds = np.array([r.smoothing_kind for r in history])
    initial = float(np.mean(kinds[: args.pop] == "es"))
    late = float(np.mean(kinds[-max(1, len(kinds) // 4):] == "es"))
    summary = {"best_id": best.id, "best_kind": best.smoothing_kind, "es_share_initial": initial, "es_share_last_quarter": late,
               "final_counts": {k: int(c[-1]) for k, c in counts.cumulative.items()}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()

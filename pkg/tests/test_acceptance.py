"""Acceptance criteria, one group of tests per criterion.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import json
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from voltcast.cli import main
from voltcast.data import SyntheticConfig, StationMeta, WeatherPanel, apply_scaler, fit_scaler, generate_synthetic
from voltcast.forecaster import LayerSpec, ModelDims, NetworkGraph, TrainConfig, assemble_model, predict, train_model
from voltcast.kalman import KalmanConfig, KalmanState, init_kalman, kalman_step, run_online
from voltcast.metrics import compute_mape
from voltcast.plots import learned_weather
from voltcast.search import (
    Candidate,
    EAConfig,
    GraphMenu,
    SearchSpace,
    best_so_far,
    enumerate_space,
    evaluate_candidate,
    read_kind_counts_csv,
    run_search_detailed,
    smoothing_kind_history,
)
from voltcast.weather_layers import (
    ExpSmoothingLayer,
    PonderationLayer,
    RecurrentSmoothingLayer,
    construct_es_rnn_weights,
    es_backward,
    es_forward,
    layer_backward,
    recurrent_forward,
    scaled_aggregation_params,
)

from .oracles import central_diff, param_fd, rel_err, smooth_recursion


def es_layer(alpha, channels=1):
    return ExpSmoothingLayer(channels, raw_alpha=[float(np.log(alpha / (1 - alpha)))] * channels)


def note(request, text):
    request.node.criterion_detail = text


# ---------------------------------------------------------------- 1


@pytest.mark.criterion(1)
def test_smoothing_equivalence(request):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for alpha in np.round(np.arange(0.1, 1.0, 0.1), 1):
        for b in (1, 2, 5):
            for h in (1, 48):
                x = rng.normal(size=(b, h, 1))
                out, _ = es_forward(es_layer(alpha), x)
                ref = smooth_recursion(x, alpha, x[0, 0, 0])
                worst = max(worst, float(np.max(np.abs(out.detach().numpy() - ref))))
    elapsed = time.perf_counter() - start
    note(request, f"max abs diff {worst:.2e}, {elapsed:.2f}s")
    assert worst < 1e-12
    assert elapsed < 5.0


# ---------------------------------------------------------------- 2


@pytest.mark.criterion(2)
@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 10_000),
    st.sampled_from([1, 4, 48]),
    st.lists(st.integers(1, 9), max_size=9, unique=True),
    st.floats(0.05, 0.95),
)
def test_batch_partition_invariance(seed, h, cuts, alpha):
    x = np.random.default_rng(seed).normal(size=(10, h, 2))
    whole, _ = es_forward(es_layer(alpha, 2), x)
    layer = es_layer(alpha, 2)
    bounds = [0] + sorted(cuts) + [10]
    parts = [es_forward(layer, x[a:b])[0] for a, b in zip(bounds, bounds[1:])]
    assert torch.max(torch.abs(torch.cat(parts) - whole)) < 1e-12


# ---------------------------------------------------------------- 3


@pytest.mark.criterion(3)
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.floats(0.01, 0.99), st.integers(0, 10_000))
def test_rnn_construction(h, alpha, seed):
    x = np.random.default_rng(seed).normal(size=(6, h, 1))
    rnn = RecurrentSmoothingLayer("vanilla", h, 1, activation="identity")
    rnn.set_parameters(*construct_es_rnn_weights(alpha, h))
    got, _ = recurrent_forward(rnn, x)
    ref, _ = es_forward(es_layer(alpha), x)
    assert torch.max(torch.abs(got - ref)) < 1e-8


# ---------------------------------------------------------------- 4


@pytest.mark.criterion(4)
def test_scaled_aggregation_identity(request):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        t, h, i = int(rng.integers(2, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 9))
        raw = rng.normal(rng.normal(0, 20, (1, 1, 1, i)), rng.uniform(0.1, 8, (1, 1, 1, i)), (t, h, 1, i))
        a = rng.dirichlet(np.ones(i))[None, :]
        stations = [StationMeta(str(k), str(k), 0, 0) for k in range(i)]
        panel = WeatherPanel(raw, ["temperature"], stations, np.datetime64("2021-01-01").astype(object), h)
        scaler = fit_scaler(panel, (0, t), weights_hint=a, allow_degenerate=True)
        if scaler.aggregate_maxs[0] == scaler.aggregate_mins[0]:
            continue
        scaled = apply_scaler(panel, scaler).values[:, :, 0]
        agg = raw[:, :, 0] @ a[0]
        ref = (agg - scaler.aggregate_mins[0]) / (scaler.aggregate_maxs[0] - scaler.aggregate_mins[0])
        av, bv = scaled_aggregation_params(a[0], scaler, 0)
        worst = max(worst, float(np.max(np.abs(scaled @ av + bv - ref))))
    note(request, f"max abs diff {worst:.2e}")
    assert worst < 1e-10


# ---------------------------------------------------------------- 5


@pytest.mark.criterion(5)
def test_gradient_suite(request):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    errs = {}

    # ponderation
    w, b = rng.normal(size=(2, 4)), rng.normal(size=2)
    x, up = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 2))
    g = layer_backward(PonderationLayer(w, b), x, up)
    f = lambda ww, bb, xx: float(((xx @ ww.T + bb) * up).sum())
    errs["ponderation"] = max(
        rel_err(g.param_grads["weights"], central_diff(lambda ww: f(ww, b, x), w)),
        rel_err(g.param_grads["bias"], central_diff(lambda bb: f(w, bb, x), b)),
        rel_err(g.input_grad, central_diff(lambda xx: f(w, b, xx), x)),
    )

    # exponential smoothing: raw alpha and input
    x, up = rng.normal(size=(2, 4, 2)), rng.normal(size=(2, 4, 2))
    raw, carry = rng.normal(size=2), rng.normal(size=2)
    layer = ExpSmoothingLayer(2, raw_alpha=raw)
    g = es_backward(layer, x, up, carry=carry)

    def es_loss(r, xx):
        lay = ExpSmoothingLayer(2, raw_alpha=r)
        return float((lay.smooth(torch.as_tensor(xx), torch.as_tensor(carry)).detach().numpy() * up).sum())

    errs["smoothing"] = max(
        rel_err(g.param_grads["raw_alpha"], central_diff(lambda r: es_loss(r, x), raw)),
        rel_err(g.input_grad, central_diff(lambda xx: es_loss(raw, xx), x)),
    )

    # recurrent cells
    worst = 0.0
    for kind in ("vanilla", "lstm", "gru"):
        rnn = RecurrentSmoothingLayer(kind, 3, 2, seed=7)
        x, up = rng.normal(size=(3, 3, 2)), rng.normal(size=(3, 3, 2))
        recurrent_forward(rnn, x)
        state = rnn.last_state_in
        g = layer_backward(rnn, x, up)
        loss = lambda: (rnn.run(torch.as_tensor(x), *state)[0] * torch.as_tensor(up)).sum()
        for name, grad in g.param_grads.items():
            worst = max(worst, rel_err(grad, param_fd(rnn, name, loss)))
        worst = max(worst, rel_err(g.input_grad, central_diff(
            lambda xx: float((rnn.run(torch.as_tensor(xx), *state)[0].detach().numpy() * up).sum()), x)))
    errs["recurrent"] = worst

    # full tiny model: I=3, V=2, F=4, H=4, D=3
    dims = ModelDims(h=4, v=2, i=3, f=4)
    g1 = NetworkGraph.chain([LayerSpec("dense_over_features", 4, activation="sigmoid")])
    g2 = NetworkGraph.chain([LayerSpec("dense_over_features", 3, activation="sigmoid")], "gamma2_1d")
    model = assemble_model(Candidate(f_v=(2, 1), gamma1=g1, gamma2=g2), dims, seed=4)
    assert model.hidden_dim == 3
    wb = torch.as_tensor(rng.uniform(size=(3, 4, 2, 3)))
    cb = torch.as_tensor(rng.uniform(size=(3, 4, 4)))
    target = torch.as_tensor(rng.uniform(size=(3, 4)))

    def model_loss():
        model.reset_carry()
        return ((model(wb, cb)[0] - target) ** 2).mean()

    model.zero_grad()
    model_loss().backward()
    analytic = {k: p.grad.numpy().copy() for k, p in model.named_parameters()}
    errs["full model"] = max(rel_err(analytic[k], param_fd(model, k, model_loss)) for k in analytic)

    elapsed = time.perf_counter() - start
    note(request, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {elapsed:.1f}s")
    assert all(v < 1e-4 for v in errs.values()), errs
    assert elapsed < 60.0


# ---------------------------------------------------------------- 6


@pytest.mark.criterion(6)
def test_kalman_least_squares_oracle(request):
    rng = np.random.default_rng(7)
    cfg = KalmanConfig(sigma2=1.0, q_diag=0.0, p0=1e6)
    state = init_kalman(3, cfg)
    phis, ys = [], []
    for _ in range(25):
        phi = rng.normal(size=(8, 4))
        y = phi @ rng.uniform(0.5, 1.5, 4) + 0.1 * rng.normal(size=8)
        state = kalman_step(state, phi, y, cfg)
        phis.append(phi)
        ys.append(y)
    big_phi, big_y = np.vstack(phis), np.concatenate(ys)
    oracle = np.linalg.solve(big_phi.T @ big_phi, big_phi.T @ big_y)
    diff = float(np.max(np.abs(state.theta_hat - oracle)))
    note(request, f"least squares diff {diff:.1e}")
    assert diff < 1e-6


@pytest.mark.criterion(6)
def test_kalman_scalar_update(request):
    theta0, p0, phi, y, sigma2 = 0.8, 2.5, 1.7, 3.1, 0.4
    new = kalman_step(KalmanState(np.array([theta0]), np.array([[p0]])), [[phi]], [y], KalmanConfig(sigma2=sigma2, q_diag=0.0))
    expected = theta0 + p0 * phi * (y - phi * theta0) / (phi**2 * p0 + sigma2)
    diff = abs(new.theta_hat[0] - expected)
    note(request, f"1-D diff {diff:.1e}")
    assert diff < 1e-12


# ---------------------------------------------------------------- 7


@pytest.mark.criterion(7)
def test_recalibration_direction(request):
    start = time.perf_counter()
    ds, _ = generate_synthetic(SyntheticConfig(level_shift=-0.05))
    model = assemble_model(Candidate(f_v=(1, 1, 1)), ModelDims.from_dataset(ds), seed=0)
    train_model(model, ds, TrainConfig(epochs=50))
    recal = run_online(model, ds, ds.splits.test, KalmanConfig(sigma2=1e-2, q_diag=1e-5))
    a, b = ds.splits.test
    static = compute_mape(ds.load.values[a:b], recal.static)
    recalibrated = compute_mape(ds.load.values[a:b], recal.forecasts)
    elapsed = time.perf_counter() - start
    note(request, f"static {static:.3f}%, recalibrated {recalibrated:.3f}%, ratio {recalibrated / static:.3f}, {elapsed:.1f}s")
    assert recalibrated <= 0.9 * static
    assert elapsed < 180.0


# ---------------------------------------------------------------- 8


@pytest.fixture(scope="module")
def recovery():
    start = time.perf_counter()
    ds, truth = generate_synthetic(SyntheticConfig(noise_sigma=0.0, true_alpha=0.8))
    model = assemble_model(Candidate(f_v=(1, 1, 1)), ModelDims.from_dataset(ds), seed=0)
    train_model(model, ds, TrainConfig(epochs=60))
    return ds, truth, model, time.perf_counter() - start


@pytest.mark.criterion("8a")
def test_recovery_mape(request, recovery):
    ds, truth, model, elapsed = recovery
    a, b = ds.splits.test
    y = ds.load.values[a:b]
    model_mape = compute_mape(y, predict(model, ds, ds.splits.test).forecasts)
    oracle_mape = compute_mape(y, truth.clean_load[a:b])
    note(request, f"model {model_mape:.3f}%, oracle {oracle_mape:.3f}%, {elapsed:.1f}s")
    assert model_mape <= 2 * oracle_mape
    assert elapsed < 180.0


@pytest.mark.criterion("8b")
def test_recovery_smoothed_temperature(request, recovery):
    ds, truth, model, elapsed = recovery
    _, smoothed, days = learned_weather(model, ds)
    r = float(np.corrcoef(smoothed[..., 0].ravel(), truth.smoothed_temperature[days].ravel())[0, 1])
    note(request, f"pearson {r:.4f}, {elapsed:.1f}s")
    assert r >= 0.98
    assert elapsed < 180.0


# ---------------------------------------------------------------- 9


def miniature():
    # every split inside one month, so no calendar feature is unseen in training
    ds, _ = generate_synthetic(SyntheticConfig(t_days=31, h=8, v=2, i=4, seed=5, start_date="2018-03-01",
                                               train_frac=0.5, valid_frac=0.3))
    return ds


def enumerable_space():
    return SearchSpace(
        f_v_choices=[[1, 2], [1, 2]],
        smoothing_kinds=["es"],
        lr_choices=[0.1, 0.3],
        epoch_choices=[50, 400],
        batch_size_choices=[16],
        sigma2_choices=[1e-3, 1e-1],
        q_scale_choices=[1e-5],
        gamma1_menu=GraphMenu(max_depth=0),
        gamma2_menu=GraphMenu(max_depth=0),
    )


@pytest.mark.criterion(9)
def test_search_oracle(request):
    start = time.perf_counter()
    ds, space = miniature(), enumerable_space()
    candidates = enumerate_space(space)
    assert len(candidates) <= 64
    optimum = min(evaluate_candidate(c, ds).objective for c in candidates)
    run = run_search_detailed(space, EAConfig(population_size=8, budget_evaluations=40, seed=0), ds)
    found = min(r.objective for r in run.history)
    gap = found / optimum - 1
    elapsed = time.perf_counter() - start
    note(request, f"{len(candidates)} candidates, exhaustive {optimum:.5f}, search {found:.5f}, gap {gap:+.2%}, {elapsed:.1f}s")
    assert gap <= 0.05
    assert np.all(np.diff(best_so_far(run.history)) <= 0)
    assert set(run.population_sizes) == {8}
    assert len(run.history) == 40
    assert elapsed < 300.0


# ---------------------------------------------------------------- 10 and 11


@pytest.fixture(scope="module")
def cli_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_cli")
    synth = {"t_days": 31, "h": 8, "v": 2, "i": 4, "seed": 5, "start_date": "2018-03-01", "train_frac": 0.5, "valid_frac": 0.3}
    (root / "synth.json").write_text(json.dumps(synth))
    space = enumerable_space().to_dict()
    space.update(smoothing_kinds=["es", "gru"], epoch_choices=[20], lr_choices=[0.1])
    (root / "space.json").write_text(json.dumps(space))
    (root / "cand.json").write_text(json.dumps(Candidate(f_v=(2, 1), smoothing_kind="lstm", epochs=10, id=4).to_dict()))
    assert main(["synth", "--config", str(root / "synth.json"), "--out", str(root / "data")]) == 0
    return root


def search_argv(root, out, workers):
    return ["search", "--data", str(root / "data"), "--space", str(root / "space.json"), "--pop", "4",
            "--budget", "10", "--workers", str(workers), "--seed", "3", "--out", str(root / out)]


ARTIFACTS = ("history.jsonl", "best.json", "smoothing_kinds.csv")


@pytest.mark.criterion(10)
def test_train_determinism(cli_root):
    r = cli_root
    for out in ("m1.json", "m2.json"):
        argv = ["train", "--data", str(r / "data"), "--candidate", str(r / "cand.json"), "--seed", "9", "--out", str(r / out)]
        assert main(argv) == 0
    assert (r / "m1.json").read_bytes() == (r / "m2.json").read_bytes()


@pytest.mark.criterion(10)
def test_search_determinism(cli_root):
    r = cli_root
    assert main(search_argv(r, "s1", 1)) == 0
    assert main(search_argv(r, "s2", 1)) == 0
    for name in ARTIFACTS:
        assert (r / "s1" / name).read_bytes() == (r / "s2" / name).read_bytes(), name


@pytest.mark.criterion(10)
def test_search_workers(cli_root):
    r = cli_root
    if not (r / "s1" / "history.jsonl").exists():
        assert main(search_argv(r, "s1", 1)) == 0
    assert main(search_argv(r, "s4", 4)) == 0

    def keyed(path):
        return {json.loads(line)["candidate_id"]: json.loads(line) for line in path.read_text().splitlines()}

    assert keyed(r / "s1" / "history.jsonl") == keyed(r / "s4" / "history.jsonl")
    assert (r / "s1" / "best.json").read_text() == (r / "s4" / "best.json").read_text()


@pytest.mark.criterion(11)
def test_kind_history_round_trip(cli_root):
    r = cli_root
    if not (r / "s1" / "history.jsonl").exists():
        assert main(search_argv(r, "s1", 1)) == 0
    from voltcast.search import read_history

    history = read_history(r / "s1" / "history.jsonl")
    counts = smoothing_kind_history(history)
    totals = sum(c for c in counts.cumulative.values())
    np.testing.assert_array_equal(totals, np.arange(1, len(history) + 1))

    # a run directory with forecasts plus the exported counts goes through report
    run = r / "run"
    run.mkdir(exist_ok=True)
    assert main(["train", "--data", str(r / "data"), "--candidate", str(r / "cand.json"), "--out", str(r / "m.json")]) == 0
    assert main(["forecast", "--model", str(r / "m.json"), "--data", str(r / "data"), "--recalibrate",
                 "--out", str(run / "forecasts.csv")]) == 0
    (run / "smoothing_kinds.csv").write_bytes((r / "s1" / "smoothing_kinds.csv").read_bytes())
    assert main(["report", "--runs", str(run), "--data", str(r / "data"), "--out", str(r / "report.json")]) == 0
    reported = json.loads((r / "report.json").read_text())["smoothing_kinds"]["run"]
    exported = read_kind_counts_csv(r / "s1" / "smoothing_kinds.csv")
    assert reported == {k: v.tolist() for k, v in exported.items()}
    for kind in counts.kinds:
        assert reported[kind] == counts.cumulative[kind].tolist()

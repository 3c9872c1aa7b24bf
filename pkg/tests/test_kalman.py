import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voltcast.forecaster import ModelDims, TrainConfig, assemble_model, predict, train_model
from voltcast.kalman import (
    KalmanConfig,
    KalmanError,
    KalmanState,
    design_matrix,
    design_row,
    init_kalman,
    kalman_step,
    recalibrate,
    run_online,
)
from voltcast.metrics import compute_mape
from voltcast.search import Candidate


class TestInit:
    def test_ones_and_scaled_identity(self):
        s = init_kalman(2, KalmanConfig(p0=1.0))
        np.testing.assert_array_equal(s.theta_hat, [1, 1, 1])
        np.testing.assert_array_equal(s.cov, np.eye(3))

    def test_invalid(self):
        with pytest.raises(ValueError):
            init_kalman(0, KalmanConfig())

    @pytest.mark.parametrize("kw", [{"sigma2": 0.0}, {"sigma2": -1.0}, {"q_diag": -1e-3}, {"delay_days": 0}])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            KalmanConfig(**kw)


class TestDesign:
    def test_hand_example(self):
        np.testing.assert_array_equal(design_row([3.0], [2.0], 1.0), [6.0, 1.0])

    def test_zero_hidden(self):
        np.testing.assert_array_equal(design_row([0.0, 0.0], [2.0, 5.0], 0.7), [0.0, 0.0, 0.7])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10_000))
    def test_ones_recover_static(self, d, seed):
        rng = np.random.default_rng(seed)
        h, a_f, b_f = rng.normal(size=d), rng.normal(size=d), float(rng.normal())
        assert abs(design_row(h, a_f, b_f) @ np.ones(d + 1) - (a_f @ h + b_f)) < 1e-12

    def test_matrix_rows(self):
        rng = np.random.default_rng(0)
        hidden, a_f = rng.normal(size=(4, 3)), rng.normal(size=3)
        phi = design_matrix(hidden, a_f, 0.3)
        for k in range(4):
            np.testing.assert_array_equal(phi[k], design_row(hidden[k], a_f, 0.3))


class TestStep:
    def test_zero_gain(self):
        cfg = KalmanConfig(sigma2=0.5, q_diag=0.0, p0=0.0)
        state = init_kalman(2, cfg)
        rng = np.random.default_rng(0)
        new = kalman_step(state, rng.normal(size=(5, 3)), rng.normal(size=5) * 100, cfg)
        np.testing.assert_array_equal(new.theta_hat, state.theta_hat)
        np.testing.assert_array_equal(new.cov, np.zeros((3, 3)))

    @pytest.mark.parametrize("theta0,p0,phi,y,sigma2", [(1.0, 1.0, 2.0, 3.0, 0.5), (-0.3, 4.0, 0.7, -1.2, 2.0), (2.0, 1e-3, -5.0, 8.0, 1e-2)])
    def test_scalar_update_by_hand(self, theta0, p0, phi, y, sigma2):
        cfg = KalmanConfig(sigma2=sigma2, q_diag=0.0)
        new = kalman_step(KalmanState(np.array([theta0]), np.array([[p0]])), [[phi]], [y], cfg)
        expected = theta0 + p0 * phi * (y - phi * theta0) / (phi**2 * p0 + sigma2)
        assert abs(new.theta_hat[0] - expected) < 1e-12
        assert abs(new.cov[0, 0] - p0 * sigma2 / (phi**2 * p0 + sigma2)) < 1e-12

    def test_least_squares_oracle(self):
        rng = np.random.default_rng(7)
        cfg = KalmanConfig(sigma2=1.0, q_diag=0.0, p0=1e6)
        state = init_kalman(3, cfg)
        phis, ys = [], []
        for _ in range(20):
            phi = rng.normal(size=(8, 4))
            y = phi @ np.array([0.9, 1.2, 1.0, 0.8]) + 0.05 * rng.normal(size=8)
            state = kalman_step(state, phi, y, cfg)
            phis.append(phi)
            ys.append(y)
        big_phi, big_y = np.vstack(phis), np.concatenate(ys)
        oracle = np.linalg.solve(big_phi.T @ big_phi, big_phi.T @ big_y)
        assert np.max(np.abs(state.theta_hat - oracle)) < 1e-6

    def test_symmetry_over_many_steps(self):
        rng = np.random.default_rng(3)
        cfg = KalmanConfig(sigma2=1e-2, q_diag=rng.uniform(0, 1e-3, 5), p0=2.0)
        state = init_kalman(4, cfg)
        for _ in range(1000):
            state = kalman_step(state, rng.normal(size=(6, 5)), rng.normal(size=6), cfg)
            assert np.max(np.abs(state.cov - state.cov.T)) <= 1e-10
            assert np.all(np.diag(state.cov) >= 0)

    def test_shape_mismatch(self):
        cfg = KalmanConfig()
        with pytest.raises(ValueError):
            kalman_step(init_kalman(2, cfg), np.ones((4, 2)), np.ones(4), cfg)

    def test_indefinite_innovation(self):
        cfg = KalmanConfig(sigma2=1e-6, q_diag=0.0)
        state = KalmanState(np.ones(2), -np.eye(2))
        with pytest.raises(KalmanError):
            kalman_step(state, np.ones((3, 2)), np.ones(3), cfg)


def random_stream(n_days=12, h=4, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n_days, h, d)), rng.normal(size=d), 0.4, rng.normal(size=(n_days, h))


class TestRecalibrate:
    def test_frozen_filter_is_static(self):
        hidden, a_f, b_f, y = random_stream()
        out, thetas, _ = recalibrate(hidden, a_f, b_f, y, np.ones(12, bool), KalmanConfig(q_diag=0.0, p0=0.0))
        static = np.einsum("thd,d->th", hidden, a_f) + b_f
        assert np.max(np.abs(out - static)) <= 1e-12
        assert np.all(thetas == 1.0)

    def test_first_days_are_static(self):
        hidden, a_f, b_f, y = random_stream()
        out, _, _ = recalibrate(hidden, a_f, b_f, y, np.ones(12, bool), KalmanConfig(delay_days=2))
        static = np.einsum("thd,d->th", hidden, a_f) + b_f
        # no observation is available before day delay + 1
        np.testing.assert_allclose(out[:3], static[:3], atol=1e-12, rtol=0)
        assert np.max(np.abs(out[3] - static[3])) > 1e-6

    @pytest.mark.parametrize("t", [3, 6, 9])
    def test_delay_semantics(self, t):
        hidden, a_f, b_f, y = random_stream()
        cfg = KalmanConfig(delay_days=2)
        base, _, _ = recalibrate(hidden, a_f, b_f, y, np.ones(12, bool), cfg)
        y2 = y.copy()
        y2[t - 1] += 5.0
        moved, _, _ = recalibrate(hidden, a_f, b_f, y2, np.ones(12, bool), cfg)
        # the observation of day t-1 reaches neither day t nor day t+1
        np.testing.assert_array_equal(moved[: t + 2], base[: t + 2])
        assert np.max(np.abs(moved[t + 2] - base[t + 2])) > 1e-6

    def test_excluded_days_skipped(self):
        hidden, a_f, b_f, y = random_stream()
        observed = np.ones(12, bool)
        observed[4] = False
        cfg = KalmanConfig()
        base, _, _ = recalibrate(hidden, a_f, b_f, y, observed, cfg)
        y2 = y.copy()
        y2[4] = 1e6
        moved, _, _ = recalibrate(hidden, a_f, b_f, y2, observed, cfg)
        np.testing.assert_array_equal(base, moved)

    def test_repeatable(self):
        hidden, a_f, b_f, y = random_stream(seed=4)
        runs = [recalibrate(hidden, a_f, b_f, y, np.ones(12, bool), KalmanConfig()) for _ in range(2)]
        for a, b in zip(*runs):
            np.testing.assert_array_equal(a, b)


@pytest.fixture(scope="module")
def shifted():
    from voltcast.data import SyntheticConfig, generate_synthetic

    ds, _ = generate_synthetic(SyntheticConfig(t_days=120, h=12, v=2, i=4, level_shift=-0.05, seed=1))
    model = assemble_model(Candidate(f_v=(1, 1)), ModelDims.from_dataset(ds), seed=0)
    train_model(model, ds, TrainConfig(epochs=40))
    return ds, model


class TestRunOnline:
    def test_frozen_equals_predict(self, shifted):
        ds, model = shifted
        recal = run_online(model, ds, ds.splits.test, KalmanConfig(q_diag=0.0, p0=0.0))
        pred = predict(model, ds, ds.splits.test)
        assert np.max(np.abs(recal.scaled - pred.scaled)) <= 1e-12
        assert np.max(np.abs(recal.static - pred.forecasts)) == 0.0

    def test_level_shift_improves(self, shifted):
        ds, model = shifted
        recal = run_online(model, ds, ds.splits.test, KalmanConfig(sigma2=1e-2, q_diag=1e-5))
        a, b = ds.splits.test
        y = ds.load.values[a:b]
        assert compute_mape(y, recal.forecasts) < compute_mape(y, recal.static)

    def test_trajectory_json(self, shifted):
        ds, model = shifted
        recal = run_online(model, ds, ds.splits.test, KalmanConfig())
        rows = json.loads(recal.trajectory_json(ds))
        assert len(rows) == len(recal.days)
        assert rows[0]["theta"] == [1.0] * (model.hidden_dim + 1)
        assert rows[0]["date"] == ds.date_of(int(recal.days[0])).isoformat()

    def test_missing_hidden(self, shifted):
        ds, model = shifted
        pred = predict(model, ds, ds.splits.test)
        short = pred._replace(hidden=pred.hidden[:-1])
        with pytest.raises(ValueError, match="missing hidden"):
            run_online(model, ds, ds.splits.test, KalmanConfig(), prediction=short)

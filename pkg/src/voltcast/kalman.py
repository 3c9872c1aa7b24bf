"""Online recalibration of the final linear layer with a Kalman filter.

The state is a multiplicative vector over the per-feature contributions of the
last layer, with the bias as one more regressor. With the state at all ones,
the recalibrated forecast equals the static one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .data import Dataset, DayRange


class KalmanError(ArithmeticError):
    pass


@dataclass
class KalmanConfig:
    sigma2: float = 1e-3
    q_diag: object = 1e-5  # scalar or (D+1,) array
    p0: float = 1.0
    delay_days: int = 2

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be > 0")
        if np.any(np.asarray(self.q_diag) < 0):
            raise ValueError("process noise must be nonnegative")
        if self.p0 < 0:
            raise ValueError("p0 must be >= 0")
        if self.delay_days < 1:
            raise ValueError("delay_days must be >= 1")

    def q_vector(self, n: int) -> np.ndarray:
        q = np.broadcast_to(np.asarray(self.q_diag, dtype=float), (n,))
        return q.copy()


@dataclass
class KalmanState:
    theta_hat: np.ndarray
    cov: np.ndarray


def init_kalman(d: int, cfg: KalmanConfig) -> KalmanState:
    if d < 1:
        raise ValueError("d must be >= 1")
    return KalmanState(np.ones(d + 1), cfg.p0 * np.eye(d + 1))


def design_row(h, a_f, b_f: float) -> np.ndarray:
    """Per-feature contributions [a_F[0] h[0], ..., a_F[D-1] h[D-1], b_F]."""
    h = np.asarray(h, dtype=float)
    return np.append(np.asarray(a_f, dtype=float) * h, b_f)


def design_matrix(hidden_day, a_f, b_f: float) -> np.ndarray:
    """Design rows for every instant of a day; ``hidden_day`` is (H, D)."""
    hidden_day = np.asarray(hidden_day, dtype=float)
    contrib = hidden_day * np.asarray(a_f, dtype=float)[None, :]
    return np.hstack([contrib, np.full((hidden_day.shape[0], 1), float(b_f))])


def kalman_step(state: KalmanState, phi_day, y_day, cfg: KalmanConfig) -> KalmanState:
    """Random-walk predict followed by a joint update on one day's observations."""
    phi = np.atleast_2d(np.asarray(phi_day, dtype=float))
    y = np.atleast_1d(np.asarray(y_day, dtype=float))
    n = state.theta_hat.shape[0]
    if phi.shape != (y.shape[0], n):
        raise ValueError(f"design {phi.shape} does not match observations {y.shape} and state {n}")
    if not cfg.sigma2 > 0:
        raise KalmanError("sigma2 must be > 0")
    p = state.cov + np.diag(cfg.q_vector(n))
    innovation_cov = phi @ p @ phi.T + cfg.sigma2 * np.eye(y.shape[0])
    try:
        factor = scipy.linalg.cho_factor(innovation_cov)
    except np.linalg.LinAlgError as exc:
        raise KalmanError("innovation covariance is not positive definite") from exc
    gain = scipy.linalg.cho_solve(factor, phi @ p).T  # P Phi^T S^-1
    theta = state.theta_hat + gain @ (y - phi @ state.theta_hat)
    p = (np.eye(n) - gain @ phi) @ p
    p = 0.5 * (p + p.T)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(p))):
        raise KalmanError("non-finite filter state")
    return KalmanState(theta, p)


@dataclass
class Recalibration:
    days: np.ndarray
    forecasts: np.ndarray  # (days, H) MW, recalibrated
    static: np.ndarray  # (days, H) MW
    scaled: np.ndarray  # (days, H) recalibrated, scaled space
    static_scaled: np.ndarray
    thetas: np.ndarray  # (days, D+1) state used for each day's forecast
    p_diags: np.ndarray  # (days, D+1)

    def trajectory_json(self, ds: Optional[Dataset] = None) -> str:
        rows = []
        for k, day in enumerate(self.days):
            row = {"day": int(day), "theta": self.thetas[k].tolist(), "p_diag": self.p_diags[k].tolist()}
            if ds is not None:
                row["date"] = ds.date_of(int(day)).isoformat()
            rows.append(row)
        return json.dumps(rows)


def recalibrate(hidden, a_f, b_f: float, y_scaled, observed, cfg: KalmanConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run the delayed filter over consecutive days.

    For each day t: forecast with the current state, then update with day
    t - delay_days if that day is in the window and observed. Returns the
    recalibrated scaled forecasts, the state used for each forecast and the
    matching covariance diagonals.
    """
    hidden = np.asarray(hidden, dtype=float)
    n_days, _, d = hidden.shape
    state = init_kalman(d, cfg)
    out = np.empty(hidden.shape[:2])
    thetas = np.empty((n_days, d + 1))
    p_diags = np.empty((n_days, d + 1))
    phis = [design_matrix(hidden[t], a_f, b_f) for t in range(n_days)]
    for t in range(n_days):
        out[t] = phis[t] @ state.theta_hat
        thetas[t] = state.theta_hat
        p_diags[t] = np.diag(state.cov)
        src = t - cfg.delay_days
        if src >= 0 and observed[src]:
            state = kalman_step(state, phis[src], y_scaled[src], cfg)
    return out, thetas, p_diags


def run_online(model, ds: Dataset, day_range: DayRange, cfg: KalmanConfig, prediction=None) -> Recalibration:
    """Static forecasts for ``day_range`` recalibrated by the delayed filter.

    Filtering runs in scaled load space; excluded days are not used as
    observations. The filter restarts from the all-ones state at the start of
    the window.
    """
    from .forecaster import predict

    pred = prediction if prediction is not None else predict(model, ds, day_range)
    if pred.hidden.shape[0] != day_range[1] - day_range[0]:
        raise ValueError("missing hidden features for some days of the range")
    a, b = day_range
    a_f = model.a_f.detach().numpy()
    b_f = float(model.b_f.detach())
    observed = ~ds.load.exclusion_mask[a:b]
    scaled, thetas, p_diags = recalibrate(pred.hidden, a_f, b_f, ds.scaled_load[a:b], observed, cfg)
    return Recalibration(
        days=np.arange(a, b),
        forecasts=ds.scaler.unscale_load(scaled),
        static=pred.forecasts,
        scaled=scaled,
        static_scaled=pred.scaled,
        thetas=thetas,
        p_diags=p_diags,
    )

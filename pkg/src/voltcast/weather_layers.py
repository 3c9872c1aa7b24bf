"""Differentiable weather layers: station ponderation and temperature smoothing.

All layers work in float64 and on inputs shaped (days, instants, channels).
Smoothing layers are stateful: the last smoothed value (or hidden state) is
carried across calls so that feeding a stream in chronological batches gives
the same result as feeding it at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .data import ScalerParams

DTYPE = torch.float64
_ALPHA_MIN = float(np.finfo(np.float64).tiny)
_ALPHA_MAX = 1.0 - 2.0**-52


@dataclass
class LayerGradients:
    param_grads: dict[str, np.ndarray]
    input_grad: np.ndarray


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite values")


# ---------------------------------------------------------------- ponderation


class PonderationLayer(nn.Module):
    """Affine aggregation of I station signals into F_v channels for one variable."""

    def __init__(self, weights, bias, variable_index: int = 0):
        super().__init__()
        weights = _as_tensor(weights)
        bias = _as_tensor(bias)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise ValueError("weights must be (F_v, I) and bias (F_v,)")
        self.weights = nn.Parameter(weights.clone())
        self.bias = nn.Parameter(bias.clone())
        self.variable_index = variable_index

    @property
    def n_stations(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.n_stations:
            raise ValueError(f"ponderation expects {self.n_stations} stations, got last dim {x.shape[-1]}")
        return x @ self.weights.T + self.bias


def init_ponderation(i: int, f_v: int, seed: int, noise: float = 0.01, variable_index: int = 0) -> PonderationLayer:
    """Weights start at 1/i plus uniform noise in [-noise/i, noise/i]; bias at zero."""
    if i < 1 or f_v < 1:
        raise ValueError("i and f_v must be >= 1")
    rng = np.random.default_rng(seed)
    w = 1.0 / i + rng.uniform(-noise / i, noise / i, (f_v, i))
    return PonderationLayer(w, np.zeros(f_v), variable_index)


def ponderation_forward(layer: PonderationLayer, x) -> torch.Tensor:
    x = _as_tensor(x)
    _check_finite(x, "ponderation input")
    return layer(x)


def scaled_aggregation_params(raw_weights, scaler: ScalerParams, v: int) -> tuple[np.ndarray, float]:
    """Weights and bias that aggregate min-max scaled station values directly into
    the min-max scaled raw-space aggregate of variable ``v``."""
    a = np.asarray(raw_weights, dtype=float)
    if abs(a.sum() - 1.0) > 1e-9:
        raise ValueError(f"raw weights must sum to 1, got {a.sum()}")
    lo, hi = scaler.mins[v], scaler.maxs[v]
    agg_lo, agg_hi = scaler.aggregate_mins[v], scaler.aggregate_maxs[v]
    if agg_hi == agg_lo:
        raise ValueError(f"aggregate extremes coincide for variable {v}")
    span = agg_hi - agg_lo
    return a * (hi - lo) / span, float((np.dot(a, lo) - agg_lo) / span)


# ---------------------------------------------------------------- exponential smoothing


def build_smoothing_matrix(alpha, n: int) -> torch.Tensor:
    """Lower-triangular (n+1) x (n+1) matrix with entry (i, j) = alpha**(i - j) for i >= j.

    ``alpha`` may be a float or a tensor of shape (C,), giving a (C, n+1, n+1) stack.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    a = _as_tensor(alpha)
    if not torch.all((a > 0) & (a < 1)):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    idx = torch.arange(n + 1)
    lag = idx[:, None] - idx[None, :]
    lower = lag >= 0
    # exp(lag * log a) underflows cleanly to 0 for long lags
    powers = torch.exp(lag.clamp(min=0).to(DTYPE) * torch.log(a)[..., None, None])
    return torch.where(lower, powers, torch.zeros((), dtype=DTYPE))


class _ExpSmoothing(torch.autograd.Function):
    """Smooth a (n, C) stream given per-channel alpha (C,) and carry (C,)."""

    @staticmethod
    def forward(ctx, x, alpha, carry):
        n, c = x.shape
        m = build_smoothing_matrix(alpha, n)  # (C, n+1, n+1)
        aug = torch.cat([carry[None, :], (1.0 - alpha) * x], dim=0)  # (n+1, C)
        out = torch.einsum("cij,jc->ic", m, aug)
        ctx.save_for_backward(x, alpha, out, m)
        return out[1:]

    @staticmethod
    def backward(ctx, grad):
        x, alpha, out, m = ctx.saved_tensors
        # adjoint of the augmented input: M^T [0 | grad]
        g_aug = torch.cat([torch.zeros_like(grad[:1]), grad], dim=0)
        adj = torch.einsum("cji,jc->ic", m, g_aug)
        lam = adj[1:]
        grad_x = (1.0 - alpha) * lam
        # ds_k/dalpha = s_{k-1} - x_k + alpha ds_{k-1}/dalpha, folded into the adjoint
        grad_alpha = (lam * (out[:-1] - x)).sum(dim=0)
        grad_carry = adj[0]
        return grad_x, grad_alpha, grad_carry


class ExpSmoothingLayer(nn.Module):
    """Exponential smoothing with one sigmoid-encoded coefficient per channel."""

    def __init__(self, channels: int, raw_alpha: Optional[np.ndarray] = None):
        super().__init__()
        init = np.zeros(channels) if raw_alpha is None else np.asarray(raw_alpha, dtype=float)
        if init.shape != (channels,):
            raise ValueError("raw_alpha must have one entry per channel")
        self.raw_alpha = nn.Parameter(_as_tensor(init))
        self.register_buffer("carry", torch.zeros(channels, dtype=DTYPE))
        self.carry_ready = False
        self.last_carry_in: Optional[torch.Tensor] = None

    @property
    def channels(self) -> int:
        return self.raw_alpha.shape[0]

    @property
    def alpha(self) -> torch.Tensor:
        # float64 sigmoid rounds to exactly 1.0 beyond ~37; keep alpha strictly inside (0, 1)
        return torch.sigmoid(self.raw_alpha).clamp(_ALPHA_MIN, _ALPHA_MAX)

    def reset_carry(self) -> None:
        self.carry_ready = False

    def smooth(self, x: torch.Tensor, carry: torch.Tensor) -> torch.Tensor:
        b, h, c = x.shape
        flat = _ExpSmoothing.apply(x.reshape(b * h, c), self.alpha, carry)
        return flat.reshape(b, h, c)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-1]}")
        _check_finite(x, "smoothing input")
        if not self.carry_ready:
            # warm start: the first value smooths to itself; the carry stays
            # attached to x so gradients see the dependence
            carry = x[0, 0]
            self.carry_ready = True
        else:
            carry = self.carry.detach()
        self.last_carry_in = carry.detach().clone()
        out = self.smooth(x, carry)
        self.carry = out[-1, -1].detach().clone()
        return out


def es_forward(layer: ExpSmoothingLayer, x) -> tuple[torch.Tensor, ExpSmoothingLayer]:
    out = layer(_as_tensor(x))
    return out, layer


def es_backward(layer: ExpSmoothingLayer, x, upstream_grad, carry=None) -> LayerGradients:
    """Gradients of <upstream_grad, es_forward(x)> w.r.t. raw_alpha and the input.

    Uses ``carry`` if given, otherwise the carry the layer consumed on its last
    forward pass. The layer's state is not modified.
    """
    x = _as_tensor(x).detach().clone().requires_grad_(True)
    g = _as_tensor(upstream_grad)
    if g.shape != x.shape:
        raise ValueError(f"upstream grad shape {tuple(g.shape)} != input shape {tuple(x.shape)}")
    if carry is None:
        carry = layer.last_carry_in if layer.last_carry_in is not None else x[0, 0].detach()
    out = layer.smooth(x, _as_tensor(carry))
    grad_alpha, grad_x = torch.autograd.grad(out, (layer.raw_alpha, x), g)
    return LayerGradients({"raw_alpha": grad_alpha.numpy()}, grad_x.numpy())


# ---------------------------------------------------------------- recurrent smoothing


def construct_es_rnn_weights(alpha: float, h: int):
    """Recurrent weights that make a vanilla cell with identity activation
    reproduce exponential smoothing of day-long input vectors."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if h < 1:
        raise ValueError("h must be >= 1")
    lag = np.arange(h)[:, None] - np.arange(h)[None, :]
    w1 = np.where(lag >= 0, alpha ** np.clip(lag, 0, None) * (1.0 - alpha), 0.0)
    w2 = np.zeros((h, h))
    w2[:, h - 1] = alpha ** np.arange(1, h + 1)
    return w1, w2, np.zeros(h), np.zeros(h)


_ACTIVATIONS = {"identity": lambda z: z, "tanh": torch.tanh, "relu": torch.relu}


class RecurrentSmoothingLayer(nn.Module):
    """Day-level recurrent smoothing: each day's H-vector is one time step.

    Weights are shared across channels; each channel keeps its own hidden state.
    """

    def __init__(self, cell_kind: str, h: int, channels: int, activation: str = "tanh", seed: int = 0):
        super().__init__()
        if cell_kind not in ("vanilla", "lstm", "gru"):
            raise ValueError(f"unknown cell kind {cell_kind!r}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.cell_kind = cell_kind
        self.activation = activation
        self.h = h
        self.channels = channels
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / np.sqrt(h)

        def uniform(*shape):
            return nn.Parameter((torch.rand(*shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)

        gates = {"vanilla": 1, "lstm": 4, "gru": 3}[cell_kind]
        self.w1 = uniform(gates * h, h)
        self.w2 = uniform(gates * h, h)
        self.b1 = uniform(gates * h)
        self.b2 = uniform(gates * h)
        self.hidden: Optional[torch.Tensor] = None
        self.cell: Optional[torch.Tensor] = None
        self.last_state_in = None

    def set_parameters(self, w1, w2, b1, b2) -> None:
        with torch.no_grad():
            for p, val in zip((self.w1, self.w2, self.b1, self.b2), (w1, w2, b1, b2)):
                val = _as_tensor(val)
                if val.shape != p.shape:
                    raise ValueError(f"parameter shape {tuple(val.shape)} != {tuple(p.shape)}")
                p.copy_(val)

    def reset_carry(self) -> None:
        self.hidden = None
        self.cell = None

    def _initial_state(self, first_day: torch.Tensor, attached: bool = False):
        # first_day: (C, H)
        if self.cell_kind == "vanilla":
            # hold the first observed value, mirroring the smoothing warm start
            hidden = first_day[:, :1].expand(-1, self.h)
            hidden = hidden.clone() if attached else hidden.detach().clone()
        else:
            hidden = torch.zeros(self.channels, self.h, dtype=DTYPE)
        cell = torch.zeros(self.channels, self.h, dtype=DTYPE) if self.cell_kind == "lstm" else None
        return hidden, cell

    def step(self, x: torch.Tensor, hidden: torch.Tensor, cell: Optional[torch.Tensor]):
        """One day for all channels: x, hidden are (C, H)."""
        gi = x @ self.w1.T + self.b1
        gh = hidden @ self.w2.T + self.b2
        if self.cell_kind == "vanilla":
            return _ACTIVATIONS[self.activation](gi + gh), None
        if self.cell_kind == "lstm":
            i, f, g, o = (gi + gh).chunk(4, dim=-1)
            cell = torch.sigmoid(f) * cell + torch.sigmoid(i) * torch.tanh(g)
            return torch.sigmoid(o) * torch.tanh(cell), cell
        r_i, z_i, n_i = gi.chunk(3, dim=-1)
        r_h, z_h, n_h = gh.chunk(3, dim=-1)
        r = torch.sigmoid(r_i + r_h)
        z = torch.sigmoid(z_i + z_h)
        n = torch.tanh(n_i + r * n_h)
        return (1 - z) * n + z * hidden, None

    def run(self, x: torch.Tensor, hidden, cell) -> tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
        days = x.permute(0, 2, 1)  # (B, C, H)
        outs = []
        for b in range(days.shape[0]):
            hidden, cell = self.step(days[b], hidden, cell)
            outs.append(hidden)
        return torch.stack(outs).permute(0, 2, 1), hidden, cell

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.h or x.shape[2] != self.channels:
            raise ValueError(f"expected (B, {self.h}, {self.channels}) input, got {tuple(x.shape)}")
        _check_finite(x, "recurrent input")
        if self.hidden is None:
            # a fresh state may depend on x (vanilla warm start); keep it attached
            state_in = self._initial_state(x[0].T, attached=True)
        else:
            state_in = (self.hidden.detach(), None if self.cell is None else self.cell.detach())
        self.last_state_in = tuple(None if s is None else s.detach() for s in state_in)
        out, hidden, cell = self.run(x, *state_in)
        _check_finite(out, f"{self.cell_kind} smoothing output")
        self.hidden = hidden.detach()
        self.cell = None if cell is None else cell.detach()
        return out


def recurrent_forward(layer: RecurrentSmoothingLayer, x) -> tuple[torch.Tensor, RecurrentSmoothingLayer]:
    for name, p in layer.named_parameters():
        _check_finite(p.detach(), f"parameter {name}")
    return layer(_as_tensor(x)), layer


def layer_backward(layer: nn.Module, x, upstream_grad, state=None) -> LayerGradients:
    """Parameter and input gradients of <upstream_grad, layer(x)>.

    Smoothing layers reuse the state consumed by their last forward pass (or
    ``state``); their carried state is left untouched.
    """
    if isinstance(layer, ExpSmoothingLayer):
        return es_backward(layer, x, upstream_grad, state)
    x = _as_tensor(x).detach().clone().requires_grad_(True)
    g = _as_tensor(upstream_grad)
    if isinstance(layer, RecurrentSmoothingLayer):
        if state is None:
            state = layer.last_state_in or layer._initial_state(x[0].T.detach())
        out, _, _ = layer.run(x, *state)
    else:
        out = layer(x)
    if g.shape != out.shape:
        raise ValueError(f"upstream grad shape {tuple(g.shape)} != output shape {tuple(out.shape)}")
    names, params = zip(*layer.named_parameters())
    grads = torch.autograd.grad(out, (*params, x), g)
    return LayerGradients({n: gr.numpy() for n, gr in zip(names, grads[:-1])}, grads[-1].numpy())

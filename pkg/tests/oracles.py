"""Independent reference computations used by the tests."""

import numpy as np
import torch


def smooth_recursion(x, alpha, carry):
    """Scalar loop s_k = (1 - a) x_k + a s_{k-1}, s_0 = carry, over a flat sequence."""
    out = []
    s = carry
    for xk in np.asarray(x, dtype=float).ravel():
        s = (1.0 - alpha) * xk + alpha * s
        out.append(s)
    return np.array(out).reshape(np.shape(x))


def central_diff(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function over every entry of x."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), np.max(np.abs(a)), 1e-8))


def param_fd(module: torch.nn.Module, name: str, loss_fn, step: float = 1e-5) -> np.ndarray:
    """Finite-difference gradient of loss_fn() w.r.t. one named parameter of module."""
    param = dict(module.named_parameters())[name]
    base = param.detach().clone()

    def f(values):
        with torch.no_grad():
            param.copy_(torch.as_tensor(values))
        return float(torch.as_tensor(loss_fn()).detach())

    try:
        return central_diff(f, base.numpy(), step)
    finally:
        with torch.no_grad():
            param.copy_(base)

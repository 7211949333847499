"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-3) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()`` w.r.t. each tensor in ``params``."""
    out = []
    with no_grad():
        for p in params:
            g = np.zeros(p.shape, dtype=np.float64)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = fn().item()
                flat[i] = orig - step
                lo = fn().item()
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * step)
            out.append(g)
    return out


def analytic_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    fn().backward()
    return [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``; zero when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def max_gradient_error(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-3) -> float:
    """Largest per-tensor relative error between backprop and central differences."""
    ana = analytic_gradients(fn, params)
    num = numerical_gradients(fn, params, step)
    return max(relative_error(a, n) for a, n in zip(ana, num))


def random_projection(shape, seed: int = 9001) -> np.ndarray:
    """Fixed random weights used to reduce a tensor output to a scalar."""
    return np.random.default_rng(seed).standard_normal(shape)

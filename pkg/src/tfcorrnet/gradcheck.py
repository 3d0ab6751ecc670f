"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-4) -> np.ndarray:
    """d fn() / d x by central differences, perturbing ``x.data`` in place."""
    g = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn().data.sum())
        flat[i] = orig - step
        fm = float(fn().data.sum())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger of the two gradients' max magnitudes."""
    denom = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4) -> float:
    """Worst relative error over ``inputs`` between backprop and finite differences.

    ``fn`` must rebuild the graph on every call and return a tensor; a
    non-scalar output is reduced by summation.
    """
    for x in inputs:
        x.grad = None
    out = fn()
    loss = out if out.size == 1 else out.sum()
    loss.backward()
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        worst = max(worst, relative_error(analytic, numerical_grad(fn, x, step)))
    return worst

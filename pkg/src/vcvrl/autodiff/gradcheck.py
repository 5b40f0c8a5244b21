"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float) -> np.ndarray:
    """d fn() / d x by central differences, perturbing ``x.data`` in place."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(fn().data)
        flat[i] = orig - eps
        minus = float(fn().data)
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(np.asarray(a, np.float64) - np.asarray(b, np.float64))
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(num / den)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float | None = None) -> float:
    """Largest relative error between analytic and numerical gradients over ``inputs``.

    ``fn`` must rebuild its scalar output from the current values of ``inputs``.
    """
    for x in inputs:
        x.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for x in inputs:
        step = eps if eps is not None else (1e-2 if x.dtype == np.float32 else 1e-6)
        analytic = x.grad if x.grad is not None else np.zeros(x.shape)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, x, step)))
    return worst

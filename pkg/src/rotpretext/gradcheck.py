"""Central finite differences, the oracle for every backward rule."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Estimate d f(x) / dx elementwise with ``(f(x+h e_i) - f(x-h e_i)) / 2h``.

    ``x`` is perturbed in place and restored. Run under ``precision(np.float64)``
    for meaningful accuracy.
    """
    if h <= 0:
        raise ValueError("finite difference step must be > 0")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0

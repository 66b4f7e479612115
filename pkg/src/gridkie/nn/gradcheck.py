"""Central-difference gradient checking for the hand-written kernels.

Run checks in float64: the forward passes are accurate to ~1e-12 there,
so a healthy analytic gradient agrees with the numeric one to ~1e-6.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def central_difference(
    f: Callable[[], float],
    x: np.ndarray,
    eps: float = 1e-5,
    indices: Sequence[tuple] | None = None,
) -> np.ndarray:
    """Numeric gradient of a scalar function with respect to x.

    f re-reads x on every call; x is perturbed in place and restored.
    When indices is given only those entries are probed (the rest of the
    returned array stays zero) — essential for big tensors.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    it = indices if indices is not None else list(np.ndindex(*x.shape))
    for idx in it:
        orig = x[idx]
        x[idx] = orig + eps
        f_plus = f()
        x[idx] = orig - eps
        f_minus = f()
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-3) -> float:
    """Worst-case relative disagreement, floored so near-zero pairs don't blow up."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(
    f: Callable[[], float],
    x: np.ndarray,
    analytic: np.ndarray,
    eps: float = 1e-5,
    floor: float = 1e-3,
    indices: Sequence[tuple] | None = None,
) -> float:
    """Compare an analytic gradient against central differences.

    Returns the max relative error over the probed entries.
    """
    numeric = central_difference(f, x, eps=eps, indices=indices)
    if indices is not None:
        probed = [tuple(i) for i in indices]
        a = np.array([analytic[i] for i in probed])
        n = np.array([numeric[i] for i in probed])
        return max_rel_error(a, n, floor)
    return max_rel_error(analytic, numeric, floor)

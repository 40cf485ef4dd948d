"""Central finite-difference gradients for verifying backward rules."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = ["numerical_gradient", "max_relative_error"]


def numerical_gradient(
    f: Callable[[], float],
    x: np.ndarray,
    eps: float = 1e-6,
    indices: Optional[Sequence[tuple]] = None,
) -> np.ndarray:
    """Perturb ``x`` in place and difference ``f``.

    Only the entries in ``indices`` are probed when given; the rest of the
    returned array is left at zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    it = indices if indices is not None else list(np.ndindex(x.shape))
    for idx in it:
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0

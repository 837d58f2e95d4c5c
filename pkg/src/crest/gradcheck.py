"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np


def numeric_grad(f: Callable[[], float], x: np.ndarray, index: tuple, h: float = 1e-3) -> float:
    """Central difference of ``f`` w.r.t. ``x[index]``; ``x`` is perturbed in place and restored."""
    old = x[index]
    x[index] = old + h
    hi = f()
    x[index] = old - h
    lo = f()
    x[index] = old
    return (hi - lo) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(f: Callable[[], float], arrays: Dict[str, np.ndarray], analytic: Dict[str, np.ndarray],
                    h: float = 1e-3, n_samples: Optional[int] = 64, min_abs: float = 1e-6,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``f`` must read the arrays in ``arrays`` (mutated in place).  Up to
    ``n_samples`` coordinates per array are checked, skipping coordinates
    where both gradients are below ``min_abs``.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, x in arrays.items():
        g = analytic[name]
        flat = list(np.ndindex(x.shape))
        if n_samples is not None and len(flat) > n_samples:
            flat = [flat[i] for i in rng.choice(len(flat), n_samples, replace=False)]
        for idx in flat:
            num = numeric_grad(f, x, idx, h)
            if abs(g[idx]) < min_abs and abs(num) < min_abs:
                continue
            worst = max(worst, relative_error(float(g[idx]), num))
    return worst

"""Central finite-difference gradient checking against the tape."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numerical_gradient(loss_fn: Callable[[], Tensor], array: np.ndarray, h: float = 1e-5,
                       coords: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. ``array`` (perturbed in place, then restored).

    Coordinates not listed in ``coords`` are left as NaN.
    """
    grad = np.full(array.shape, np.nan)
    it = coords if coords is not None else list(np.ndindex(array.shape))
    for idx in it:
        orig = array[idx]
        array[idx] = orig + h
        fp = float(loss_fn().data)
        array[idx] = orig - h
        fm = float(loss_fn().data)
        array[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def analytic_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[list, float]:
    """Tape gradients for ``params`` plus the tape's kink margin."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    return grads, tape.kink_margin


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Worst relative error over ``params``; optionally sample at most ``max_coords`` entries per tensor."""
    grads, _ = analytic_gradients(loss_fn, params)
    worst = 0.0
    for p, g in zip(params, grads):
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            flat = (rng or np.random.default_rng(0)).choice(p.data.size, max_coords, replace=False)
            coords = [np.unravel_index(i, p.shape) for i in flat]
        num = numerical_gradient(loss_fn, p.data, h, coords)
        mask = ~np.isnan(num)
        worst = max(worst, max_relative_error(g[mask], num[mask]))
    return worst

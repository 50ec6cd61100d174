"""Central finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4,
              atol: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor * max|n|, atol).

    The floor keeps coordinates whose true gradient is tiny next to the rest of
    the tensor from amplifying finite-difference round-off. ``atol`` covers
    parameters whose gradient is identically zero (a key bias under softmax,
    a bias feeding batch-norm), where both sides are pure round-off.
    """
    scale = float(np.abs(numeric).max()) if numeric.size else 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor * scale, atol))
    return np.abs(analytic - numeric) / denom


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 1e-4, atol: float = 1e-6) -> float:
    """Compare backprop gradients of the scalar ``fn()`` with central differences.

    ``fn`` must be deterministic (re-seed any dropout inside it). At most
    ``max_coords`` randomly chosen coordinates per parameter are perturbed.
    Returns the maximum elementwise relative error.
    """
    for p in params:
        p.grad = None
    out = fn()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n)
            if max_coords is not None and n > max_coords:
                coords = np.sort(rng.choice(n, size=max_coords, replace=False))
            num = np.empty(len(coords))
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + h
                fp = float(fn().data)
                flat[c] = orig - h
                fm = float(fn().data)
                flat[c] = orig
                num[j] = (fp - fm) / (2 * h)
            err = rel_error(a.reshape(-1)[coords], num, floor, atol)
            if err.size:
                worst = max(worst, float(err.max()))
    return worst

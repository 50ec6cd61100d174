"""SGD with momentum and weight decay under a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def cosine_lr(epoch: float, start: float, end: float, horizon: float) -> float:
    """Cosine anneal from ``start`` at epoch 0 to ``end`` at ``horizon``, flat afterwards."""
    if horizon <= 0:
        return end
    e = min(max(epoch, 0.0), horizon)
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * e / horizon))


@dataclass
class SgdState:
    # paper defaults: momentum and weight decay 1e-4, lr 0.1 -> 0.01 over 50 epochs
    momentum: float = 1e-4
    weight_decay: float = 1e-4
    lr_start: float = 0.1
    lr_end: float = 0.01
    horizon: float = 50.0
    buffers: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def lr(self, epoch: float) -> float:
        return cosine_lr(epoch, self.lr_start, self.lr_end, self.horizon)


class MissingGradientError(RuntimeError):
    pass


def sgd_step(params: list[Tensor], state: SgdState, epoch: float,
             allow_missing: bool = True) -> float:
    """Apply one update in place and clear gradients; returns the lr used.

    v <- mu * v + g + wd * theta;  theta <- theta - lr * v.
    Parameters without a gradient are skipped unless ``allow_missing`` is off.
    """
    lr = state.lr(epoch)
    for i, p in enumerate(params):
        if p.grad is None:
            if not allow_missing:
                raise MissingGradientError(f"parameter {p.name or i} has no gradient")
            continue
        g = p.grad.astype(p.data.dtype, copy=False)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        buf = state.buffers.get(i)
        if buf is None:
            buf = np.zeros_like(p.data)
            state.buffers[i] = buf
        buf *= state.momentum
        buf += g
        p.data -= lr * buf
        p.grad = None
    return lr


class SGD:
    """Binds a parameter list to an :class:`SgdState`."""

    def __init__(self, params: list[Tensor], state: SgdState | None = None):
        self.params = list(params)
        self.state = state or SgdState()

    def step(self, epoch: float) -> float:
        return sgd_step(self.params, self.state, epoch)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def buffers(self) -> list[np.ndarray]:
        return [self.state.buffers.get(i, np.zeros_like(p.data)) for i, p in enumerate(self.params)]

    def load_buffers(self, arrays: list[np.ndarray]) -> None:
        if len(arrays) != len(self.params):
            raise ValueError("momentum buffer count does not match parameter count")
        for i, (p, a) in enumerate(zip(self.params, arrays)):
            if a.shape != p.shape:
                raise ValueError(f"momentum buffer {i} has shape {a.shape}, expected {p.shape}")
            self.state.buffers[i] = a.astype(p.dtype).copy()

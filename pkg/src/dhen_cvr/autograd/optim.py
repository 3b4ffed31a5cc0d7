"""Adam with bias correction, applied in place."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ConfigError
from .nn import Parameter


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              m: Sequence[np.ndarray], v: Sequence[np.ndarray], lr: float,
              beta1: float, beta2: float, eps: float, step: int) -> None:
    """One Adam update of every array in ``params`` (moments updated in place)."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if step < 1:
        raise ConfigError(f"step count must be >= 1, got {step}")
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for p, g, mi, vi in zip(params, grads, m, v):
        if mi.shape != p.shape or vi.shape != p.shape:
            raise ConfigError("optimizer state is not sized to the parameters")
        if g is None:
            g = np.zeros_like(p)
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * (g * g)
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


class Adam:
    """Adam over named parameters; state is keyed by parameter name."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  [self.m[p.name] for p in self.params], [self.v[p.name] for p in self.params],
                  self.lr if lr is None else lr, self.beta1, self.beta2, self.eps, self.t)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

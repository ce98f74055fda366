"""Optimisers and learning-rate schedules operating on named numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.params[k] -= (self.lr * corr * m / (np.sqrt(v) + self.eps)).astype(self.params[k].dtype)


class Adadelta:
    """Per-dimension adaptive update (Zeiler 2012); ``lr`` scales the unit-corrected step."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1.0, rho: float = 0.95, eps: float = 1e-6):
        self.params = params
        self.lr, self.rho, self.eps = lr, rho, eps
        self.acc_g = {k: np.zeros_like(v) for k, v in params.items()}
        self.acc_dx = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        rho, eps = self.rho, self.eps
        for k, g in grads.items():
            ag, adx = self.acc_g[k], self.acc_dx[k]
            ag *= rho
            ag += (1 - rho) * g * g
            dx = np.sqrt(adx + eps) / np.sqrt(ag + eps) * g
            adx *= rho
            adx += (1 - rho) * dx * dx
            self.params[k] -= (self.lr * dx).astype(self.params[k].dtype)


@dataclass(frozen=True)
class Triangular2:
    """Cyclical learning rate whose peak amplitude halves every cycle.

    ``step_size`` counts iterations (or epochs, if called per epoch) per half cycle.
    """

    base_lr: float
    max_lr: float
    step_size: float

    def __call__(self, iteration: float) -> float:
        cycle = np.floor(1 + iteration / (2 * self.step_size))
        x = abs(iteration / self.step_size - 2 * cycle + 1)
        scale = 1.0 / 2.0 ** (cycle - 1)
        return float(self.base_lr + (self.max_lr - self.base_lr) * max(0.0, 1 - x) * scale)

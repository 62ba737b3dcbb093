"""Parameter update rules over named numpy arrays."""

from __future__ import annotations

import numpy as np


class MomentumSGD:
    """Heavy-ball SGD with a learning rate halved when the loss plateaus.

    The plateau test compares the mean loss of consecutive windows of
    ``window`` steps; a window that fails to improve on the best one by
    ``min_rel_improvement`` halves the rate.
    """

    def __init__(self, lr: float = 0.01, momentum: float = 0.9, window: int = 200,
                 min_rel_improvement: float = 0.01, min_lr: float = 1e-5):
        self.lr = lr
        self.momentum = momentum
        self.window = window
        self.min_rel_improvement = min_rel_improvement
        self.min_lr = min_lr
        self.velocity: dict[str, np.ndarray] = {}
        self._losses: list[float] = []
        self._best = np.inf

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            vel = self.velocity.get(name)
            if vel is None:
                vel = np.zeros_like(params[name])
            vel = self.momentum * vel - self.lr * g.astype(vel.dtype, copy=False)
            self.velocity[name] = vel
            params[name] = params[name] + vel

    def observe(self, loss: float) -> None:
        self._losses.append(loss)
        if len(self._losses) == self.window:
            avg = float(np.mean(self._losses))
            self._losses.clear()
            if np.isfinite(self._best) and avg > self._best * (1.0 - self.min_rel_improvement):
                self.lr = max(self.lr * 0.5, self.min_lr)
            self._best = min(self._best, avg)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            g = g.astype(params[name].dtype, copy=False)
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = (params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[name].dtype)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if total > max_norm > 0:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total

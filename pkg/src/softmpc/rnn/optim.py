"""Adam with bias correction and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError


class Adam:
    """Adam over a named parameter dict; updates arrays in place.

    Moment buffers are keyed by parameter name, so the same optimizer instance
    keeps working as long as it is stepped with gradients for the same model.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class PlateauScheduler:
    """Cut the learning rate when the monitored loss stops improving.

    After ``patience`` consecutive epochs without improvement the rate is
    multiplied by ``factor`` (floored at ``min_lr``) and the counter resets;
    any improvement also resets the counter.
    """

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 5,
                 min_lr: float = 1e-6):
        if not 0.0 < factor < 1.0:
            raise ConfigError("factor must lie in (0, 1)")
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.bad = 0
        self.n_decays = 0

    def step(self, loss: float) -> bool:
        """Record one epoch's monitored loss; True if the rate was decayed."""
        if loss < self.best:
            self.best = loss
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.bad = 0
            self.n_decays += 1
            return True
        return False

    @property
    def lr(self) -> float:
        return self.optimizer.lr

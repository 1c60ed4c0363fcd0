"""Momentum-free adaptive optimizer used by every training loop."""

from __future__ import annotations

import numpy as np


class RMSOptimizer:
    """Per-parameter step sizes from a bias-corrected second-moment estimate.

    theta <- theta - lr * g / (sqrt(v_hat) + eps) with
    v <- beta2 v + (1 - beta2) g^2 and v_hat = v / (1 - beta2^k).
    """

    def __init__(self, lr, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.k = 0
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.k += 1
        correction = 1.0 - self.beta2**self.k
        for name, g in grads.items():
            v = self._v.get(name)
            if v is None:
                v = np.zeros_like(g)
                self._v[name] = v
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * g / (np.sqrt(v / correction) + self.eps)

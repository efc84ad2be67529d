"""AMSGrad adaptive stochastic gradient optimizer.

Implements the original update (Reddi, Kale, & Kumar, 2018) without bias
correction:

    m <- beta1 * m + (1 - beta1) * g
    v <- beta2 * v + (1 - beta2) * g**2
    vhat <- max(vhat, v)
    p <- p - lr * m / (sqrt(vhat) + eps)

The max-accumulated second moment vhat is elementwise nondecreasing over
the run.  State is kept per named parameter array and updates are applied
in place (gradient ascent is handled by passing maximize=True).
"""

from __future__ import annotations

import numpy as np


class AMSGrad:
    def __init__(self, learning_rate=0.005, beta1=0.9, beta2=0.999, eps=1e-8,
                 maximize=False):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.maximize = bool(maximize)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.vhat: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Apply one update in place to every parameter present in grads."""
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.vhat[name] = np.zeros_like(p)
            if self.maximize:
                g = -g
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            np.maximum(self.vhat[name], v, out=self.vhat[name])
            p -= self.lr * m / (np.sqrt(self.vhat[name]) + self.eps)

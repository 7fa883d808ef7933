"""Optimizers over named arrays: plain gradient descent and AdamW.

State is keyed by entry name and lives for one training call; federated
rounds restart it, since aggregation replaces the underlying parameters.
"""

from __future__ import annotations

import numpy as np


class Sgd:
    """theta <- theta - lr * grad."""

    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {name: arr - self.lr * grads[name] for name, arr in values.items()}


class AdamW:
    """Adam moments with decoupled weight decay."""

    def __init__(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self._t += 1
        out = {}
        bc1 = 1.0 - self.beta1**self._t
        bc2 = 1.0 - self.beta2**self._t
        for name, arr in values.items():
            g = grads[name]
            m = self._m.get(name)
            v = self._v.get(name)
            m = g * (1 - self.beta1) if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = g * g * (1 - self.beta2) if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            out[name] = arr - self.lr * (update + self.weight_decay * arr)
        return out


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.01):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adamw":
        return AdamW(lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}, expected 'sgd' or 'adamw'")

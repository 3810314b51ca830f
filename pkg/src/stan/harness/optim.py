"""SGD with momentum and Adam over ``Param`` buffers.

Each parameter carries a learning-rate multiplier; frozen parameters are
skipped entirely (their values and optimizer state never change).
"""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, TrainingError


class Optimizer:
    def __init__(self, groups, lr: float):
        """``groups`` is an iterable of (params, lr_multiplier)."""
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr
        self.entries = [(p, float(mult)) for params, mult in groups for p in params]

    def zero_grad(self):
        for p, _ in self.entries:
            p.zero_grad()

    def step(self):
        for i, (p, mult) in enumerate(self.entries):
            if p.frozen:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError("non-finite gradient")
            self._update(i, p, self.lr * mult)

    def _update(self, i, p, lr):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, groups, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(groups, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p, _ in self.entries]

    def _update(self, i, p, lr):
        g = p.grad + self.weight_decay * p.value if self.weight_decay else p.grad
        v = self.velocity[i]
        v *= self.momentum
        v += g
        p.value -= (lr * v).astype(p.value.dtype)


class Adam(Optimizer):
    def __init__(self, groups, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(groups, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p, _ in self.entries]
        self.v = [np.zeros_like(p.value) for p, _ in self.entries]
        self.t = 0

    def step(self):
        self.t += 1
        super().step()

    def _update(self, i, p, lr):
        g = p.grad
        m, v = self.m[i], self.v[i]
        m *= self.b1
        m += (1 - self.b1) * g
        v *= self.b2
        v += (1 - self.b2) * g * g
        m_hat = m / (1 - self.b1 ** self.t)
        v_hat = v / (1 - self.b2 ** self.t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.value.dtype)


def make_optimizer(name: str, groups, lr: float, **kw) -> Optimizer:
    if name == "sgd":
        return SGD(groups, lr, **kw)
    if name == "adam":
        return Adam(groups, lr, **kw)
    raise ConfigError(f"unknown optimizer {name!r}")

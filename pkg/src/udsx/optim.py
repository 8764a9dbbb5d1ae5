"""Plain-numpy optimizers over named parameter dicts.

Weight decay is decoupled (applied directly to the parameter, scaled by the
learning rate) and skips bias vectors. State updates are deterministic.
"""

from __future__ import annotations

import numpy as np


def _decayed(name: str) -> bool:
    return not name.endswith(".b")


class Adam:
    def __init__(
        self,
        params: dict[str, np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and _decayed(name):
                p -= lr * self.weight_decay * p


class Sgd:
    def __init__(
        self,
        params: dict[str, np.ndarray],
        momentum: float = 0.9,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p in self.params.items():
            self.velocity[name] = self.momentum * self.velocity[name] + grads[name]
            p -= lr * self.velocity[name]
            if self.weight_decay and _decayed(name):
                p -= lr * self.weight_decay * p


def make_optimizer(kind: str, params, weight_decay: float, momentum: float = 0.9):
    if kind == "adam":
        return Adam(params, weight_decay=weight_decay)
    if kind == "sgd":
        return Sgd(params, momentum=momentum, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")

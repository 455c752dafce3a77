"""Gradient-descent optimizers over lists of leaf tensors."""

from dataclasses import dataclass

import numpy as np

from common.errors import ConfigError, ContractError


@dataclass
class OptimizerSettings:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.name not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.name!r}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        return self


def _grads(params):
    missing = [p.name or f"#{i}" for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ContractError(f"optimizer step: no gradient for parameter(s) {', '.join(missing)}; run backward first")
    return [p.grad for p in params]


class SGD:
    def __init__(self, params, settings):
        self.params = list(params)
        self.settings = settings
        self.steps = 0

    def step(self):
        for p, g in zip(self.params, _grads(self.params)):
            p.data -= np.asarray(self.settings.lr * g, dtype=p.dtype)
        self.steps += 1


class Adam:
    """Adam with bias-corrected moments; one state slot per parameter."""

    def __init__(self, params, settings):
        self.params = list(params)
        self.settings = settings
        self.steps = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def step(self):
        s = self.settings
        grads = _grads(self.params)
        self.steps += 1
        t = self.steps
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g.astype(np.float64)
            self.m[i] = s.beta1 * self.m[i] + (1 - s.beta1) * g
            self.v[i] = s.beta2 * self.v[i] + (1 - s.beta2) * g * g
            m_hat = self.m[i] / (1 - s.beta1 ** t)
            v_hat = self.v[i] / (1 - s.beta2 ** t)
            p.data -= (s.lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(p.dtype)


def make_optimizer(params, settings=None):
    settings = (settings or OptimizerSettings()).validate()
    if settings.name == "sgd":
        return SGD(params, settings)
    return Adam(params, settings)

"""Bias-corrected Adam and the plateau learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .diffops import Parameter

__all__ = ["Adam", "PlateauScheduler"]


class Adam:
    """Standard Adam with bias correction.

    Moment accumulators are allocated lazily in the parameter dtype so
    the same code serves float32 training and float64 checks.
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / c1
            vhat = v / c2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class PlateauScheduler:
    """Halve lr after `patience` consecutive non-improving epochs.

    Floors at `min_lr`; the bad-epoch counter resets on improvement and
    after each halving.
    """

    def __init__(self, optimizer: Adam, factor: float = 0.5,
                 patience: int = 15, min_lr: float = 1e-5):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.bad = 0

    def step(self, val_loss: float) -> float:
        if not np.isfinite(val_loss):
            raise ValueError("val_loss must be finite")
        if val_loss < self.best:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.opt.lr = max(self.opt.lr * self.factor, self.min_lr)
                self.bad = 0
        return self.opt.lr

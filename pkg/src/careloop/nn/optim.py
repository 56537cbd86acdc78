"""Adaptive-moment optimizer with decoupled weight decay and gradient clipping."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


class AdamW:
    """AdamW over named parameters, with global-norm gradient clipping.

    step() clips all gradients to `clip_norm` jointly, applies the
    bias-corrected moment update plus decoupled weight decay, then zeroes
    the gradients. Missing or non-finite gradients raise, naming the
    offending parameter.
    """

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = 1.0):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def _clip(self) -> float:
        total = 0.0
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter {name!r}")
            if not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            total += float((p.grad * p.grad).sum())
        norm = float(np.sqrt(total))
        if self.clip_norm is not None and norm > self.clip_norm and norm > 0.0:
            scale = self.clip_norm / norm
            for _, p in self.params:
                p.grad *= scale
        return norm

    def step(self) -> float:
        norm = self._clip()
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None
        return norm


class PlateauScheduler:
    """Halve the learning rate when the monitored loss stops improving."""

    def __init__(self, opt: AdamW, factor: float = 0.5, patience: int = 3,
                 min_lr: float = 1e-6):
        self.opt = opt
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_evals = 0

    def step(self, value: float):
        if value < self.best - 1e-12:
            self.best = value
            self.bad_evals = 0
            return
        self.bad_evals += 1
        if self.bad_evals > self.patience:
            self.opt.lr = max(self.min_lr, self.opt.lr * self.factor)
            self.bad_evals = 0

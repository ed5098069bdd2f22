"""SGD with momentum and Adam, as plain functions plus thin stateful wrappers.

Parameters are updated in place. Anything with ``requires_grad`` off is
skipped, which is how frozen backbone weights stay untouched.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid training or run configuration."""


def _check_lr(lr: float) -> None:
    # lr == 0 is allowed: it is the "no-op step" used to verify that training loops leave params alone
    if not (lr >= 0.0) or not math.isfinite(lr):
        raise ConfigError(f"learning rate must be non-negative and finite, got {lr}")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0,
             buffers: list | None = None) -> None:
    _check_lr(lr)
    if len(params) != len(grads):
        raise ValueError("params and grads must align")
    for i, (p, g) in enumerate(zip(params, grads)):
        if not p.requires_grad or g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        d = g + weight_decay * p.data if weight_decay else g
        if momentum:
            if buffers[i] is None:
                buffers[i] = np.array(d, dtype=p.dtype)
            else:
                buffers[i] *= momentum
                buffers[i] += d
            d = buffers[i]
        p.data -= (lr * d).astype(p.dtype)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], lr: float,
              betas: tuple[float, float], eps: float, step_count: int,
              m: list, v: list, weight_decay: float = 0.0) -> None:
    """One Adam update; ``step_count`` is 1-based and drives bias correction."""
    _check_lr(lr)
    b1, b2 = betas
    for i, (p, g) in enumerate(zip(params, grads)):
        if not p.requires_grad or g is None:
            continue
        if weight_decay:
            g = g + weight_decay * p.data
        if m[i] is None:
            m[i] = np.zeros_like(p.data)
            v[i] = np.zeros_like(p.data)
        m[i] = b1 * m[i] + (1 - b1) * g
        v[i] = b2 * v[i] + (1 - b2) * g * g
        mhat = m[i] / (1 - b1 ** step_count)
        vhat = v[i] / (1 - b2 ** step_count)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


class SGD:
    def __init__(self, params, lr=0.01, momentum=0.0, weight_decay=0.0):
        _check_lr(lr)
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buffers = [None] * len(self.params)

    def step(self, lr: float | None = None):
        sgd_step(self.params, [p.grad for p in self.params], self.lr if lr is None else lr,
                 self.momentum, self.weight_decay, self.buffers)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        _check_lr(lr)
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = [None] * len(self.params)
        self.v = [None] * len(self.params)

    def step(self, lr: float | None = None):
        self.t += 1
        adam_step(self.params, [p.grad for p in self.params], self.lr if lr is None else lr,
                  self.betas, self.eps, self.t, self.m, self.v, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

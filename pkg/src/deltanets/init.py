"""Seeded random streams and Kaiming initialization."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and an optional stream path.

    Philox output depends only on key and counter, so a given (seed, stream)
    yields the same draws on every platform.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *stream])))


def kaiming_std(fan_in: int) -> float:
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    return math.sqrt(2.0 / fan_in)


def kaiming_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32,
                 requires_grad: bool = True) -> Tensor:
    """Zero-mean Gaussian with std sqrt(2 / fan_in); for a conv, fan_in = k*k*c."""
    std = kaiming_std(fan_in)
    data = rng.standard_normal(size=tuple(shape)) * std
    return Tensor(data.astype(dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

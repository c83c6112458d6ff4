#!/usr/bin/env python3
"""
Analytic cost estimates for the four classifier families and an
instrumented multiply counter to check them against.

The formulas keep their published shape, constants dropped:
  MLTN     (log N / log k^(2L) + (L - 1)) * k^2 * d * beta^2
  LoTeNet  (log N / log k^(2L) + sum_{l=1}^{L-1} N / k^(2l)) * k^2 * d * beta^2
  Tenet-X  N * d * beta^2
  MLP      N * L
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, DomainError
from tensor_core import count_multiplies


@dataclass(frozen=True)
class ComplexityInput:
    N: int
    k: int
    L: int
    d: int
    beta: int

    def __post_init__(self) -> None:
        if min(self.N, self.k, self.L, self.d, self.beta) < 1:
            raise DomainError(f"complexity inputs must be positive, got {self}")

    @property
    def mps_cost(self) -> int:
        """k^2 * d * beta^2: one MPS operation on a k x k patch."""
        return self.k * self.k * self.d * self.beta * self.beta

    def _depth_term(self) -> float:
        base = self.k ** (2 * self.L)
        if base <= 1:
            raise DomainError(f"k^(2L) = {base}; the log-depth term needs k > 1")
        return math.log(self.N) / math.log(base)


def flops_mltn(c: ComplexityInput) -> float:
    return (c._depth_term() + (c.L - 1)) * c.mps_cost


def flops_lotenet(c: ComplexityInput) -> float:
    patch_terms = sum(c.N / c.k ** (2 * l) for l in range(1, c.L))
    return (c._depth_term() + patch_terms) * c.mps_cost


def flops_tenetx(c: ComplexityInput) -> float:
    return float(c.N * c.d * c.beta * c.beta)


def flops_mlp(c: ComplexityInput) -> float:
    return float(c.N * c.L)


def complexity_for(
    kind: str,
    height: int,
    width: int,
    strides: Sequence[int],
    feature_dim: int,
    bond_dim: int,
    mlp_layers: int = 4,
) -> float:
    """Analytic estimate for one configured model; the MLTN/LoTeNet k is the first stride."""
    n_pixels = height * width
    if kind in ("mltn", "lotenet"):
        c = ComplexityInput(n_pixels, strides[0], len(strides), feature_dim, bond_dim)
        return flops_mltn(c) if kind == "mltn" else flops_lotenet(c)
    if kind == "tenetx":
        return flops_tenetx(ComplexityInput(n_pixels, 1, 1, feature_dim, bond_dim))
    if kind == "mlp":
        return flops_mlp(ComplexityInput(n_pixels, 1, mlp_layers, 1, 1))
    raise ConfigError(f"unknown model kind '{kind}'")


def measured_flops(model, input_shape: Tuple[int, int], batch: Optional[np.ndarray] = None) -> int:
    """Multiplies performed by one eval-mode forward pass on a single image.

    The count depends only on shapes; batch selects the image (default: all 0.5).
    """
    if batch is None:
        batch = np.full((1,) + tuple(input_shape[-2:]), 0.5)
    batch = np.asarray(batch, dtype=np.float64)[:1]
    with count_multiplies() as counter:
        model.forward(batch, training=False)
    return counter.count

"""Unsupervised-loss ramp-up weight and the linear learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class RampConfig:
    w_max: float
    phi: float
    gamma: float
    iter_total: int

    def __post_init__(self):
        if self.w_max < 0:
            raise ValueError("w_max must be >= 0")
        if self.phi < 0:
            raise ValueError("phi must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.iter_total < 1:
            raise ValueError("iter_total must be >= 1")

    @property
    def iter_max(self) -> int:
        return int(round(self.gamma * self.iter_total))


def lambda_weight(iter_cur: int, cfg: RampConfig) -> float:
    """w_max * exp(-phi * (1 - iter/iter_max)^2) during ramp-up, then w_max.

    iter_max = round(gamma * iter_total); the weight is held constant
    once the ramp completes.
    """
    if iter_cur < 0:
        raise ValueError("iter_cur must be >= 0")
    iter_max = cfg.iter_max
    if iter_max <= 0 or iter_cur >= iter_max:
        return cfg.w_max
    frac = 1.0 - iter_cur / iter_max
    return cfg.w_max * math.exp(-cfg.phi * frac * frac)


def learning_rate(
    iter_cur: int, iter_total: int, lr0: float = 0.01, lr_min: float = 1e-4
) -> float:
    """Linear decay from lr0 at iteration 0 to lr_min at iter_total."""
    if not lr0 >= lr_min >= 0:
        raise ValueError("require lr0 >= lr_min >= 0")
    if iter_total < 1:
        raise ValueError("iter_total must be >= 1")
    t = min(max(iter_cur / iter_total, 0.0), 1.0)
    return lr0 + (lr_min - lr0) * t

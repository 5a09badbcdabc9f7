"""Gated teacher updates.

After each student step the student and the pre-update teacher are scored
on the same unlabeled batch; the difference of their summed uncertainty
maps decides the probability tau of applying the EMA blend this
iteration. Sign conventions:

* "literal": epsilon = (sum U_stu - sum U_tea) / |B_u| as written;
* "prose" (default): sign flipped, so epsilon > 0 means the student's
  mean uncertainty went down.

tau is 1 for epsilon > 0, else 1 / (iter^2 + 1e-5) clamped to 1 so it can
act as a probability at iteration 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .model import ModelParams, ema_update

SIGN_MODES = ("literal", "prose")

GATE_LOG_HEADER = "iter,epsilon,tau,draw,updated"


@dataclass(frozen=True)
class EmaGateConfig:
    beta: float = 0.996
    epsilon_small: float = 1e-5
    sign_mode: str = "prose"
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if self.sign_mode not in SIGN_MODES:
            raise ValueError(f"sign_mode must be one of {SIGN_MODES}")


@dataclass(frozen=True)
class GateDecision:
    epsilon_value: float
    tau: float
    updated: bool
    rng_draw: float


def uncertainty_delta(
    u_stu: Sequence[np.ndarray], u_tea: Sequence[np.ndarray], sign_mode: str = "literal"
) -> float:
    """Batch-normalized difference of summed uncertainty maps."""
    if sign_mode not in SIGN_MODES:
        raise ValueError(f"sign_mode must be one of {SIGN_MODES}")
    if len(u_stu) != len(u_tea) or len(u_stu) == 0:
        raise ValueError(f"batch sizes differ or empty: {len(u_stu)} vs {len(u_tea)}")
    for a, b in zip(u_stu, u_tea):
        if a.shape != b.shape:
            raise ValueError(f"uncertainty map shapes differ: {a.shape} vs {b.shape}")
    total_stu = float(sum(float(np.sum(m)) for m in u_stu))
    total_tea = float(sum(float(np.sum(m)) for m in u_tea))
    eps = (total_stu - total_tea) / len(u_stu)
    return -eps if sign_mode == "prose" else eps


def update_probability(epsilon_value: float, iteration: int, epsilon_small: float = 1e-5) -> float:
    """tau = 1 for epsilon > 0, else min(1, 1 / (iter^2 + epsilon_small))."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if epsilon_value > 0.0:
        return 1.0
    return min(1.0, 1.0 / (iteration * iteration + epsilon_small))


def gate_and_update(
    teacher: ModelParams,
    student: ModelParams,
    u_stu: Sequence[np.ndarray],
    u_tea: Sequence[np.ndarray],
    iteration: int,
    cfg: EmaGateConfig,
    rng: np.random.Generator,
) -> Tuple[ModelParams, GateDecision]:
    """Apply the EMA blend with probability tau; otherwise return the teacher as-is.

    With the gate disabled the blend is applied unconditionally and no
    random number is consumed.
    """
    eps = uncertainty_delta(u_stu, u_tea, cfg.sign_mode)
    if not cfg.enabled:
        return ema_update(teacher, student, cfg.beta), GateDecision(eps, 1.0, True, 0.0)
    tau = update_probability(eps, iteration, cfg.epsilon_small)
    draw = float(rng.random())
    if draw < tau:
        return ema_update(teacher, student, cfg.beta), GateDecision(eps, tau, True, draw)
    return teacher, GateDecision(eps, tau, False, draw)

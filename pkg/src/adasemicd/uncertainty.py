"""Pseudo-label qualification metric.

The per-pixel score combines three ingredients computed from a teacher
probability map:

* per-class base-2 entropy  e_k = -p_k * log2(p_k),
* batch-level class rebalancing  E' = w1 * e0 + w0 * e1  (the majority
  proportion deliberately multiplies the minority entropy channel),
* the prediction margin  D = |p1 - p0|  that amplifies confusable pixels,

yielding  U = 1 - D * E'  per pixel. Note U is 1 both at p = 0.5 (D = 0)
and at one-hot predictions (E' = 0) and dips in between; the formula is
kept exactly in this form, quirk included.

Since -p*log2(p) <= 0.5308 and D <= 1, every pixel satisfies
0.4692 <= U <= 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_PLOGP = 0.5308  # max of -p*log2(p) over [0, 1], attained at p = 1/e
U_LOWER_BOUND = 1.0 - MAX_PLOGP

METRIC_MODES = ("entropy", "rebalance", "confusion", "uncertainty")


@dataclass(frozen=True)
class ClassWeights:
    """Batch proportions of unchanged (w0) and changed (w1) pixels."""

    w0: float
    w1: float


def per_class_entropy(p: np.ndarray) -> np.ndarray:
    """(2, H, W) map of -p_k * log2(p_k), with 0 * log2(0) := 0."""
    p = np.asarray(p, dtype=np.float64)
    e = np.zeros_like(p)
    nz = p > 0.0
    e[nz] = -p[nz] * np.log2(p[nz])
    return e


def batch_class_weights(masks: Sequence[np.ndarray]) -> ClassWeights:
    """Pixel fractions of the two classes over a batch of argmax masks."""
    if len(masks) == 0:
        raise ValueError("class weights of an empty batch are undefined")
    n_changed = 0
    n_total = 0
    for m in masks:
        if np.any((m != 0) & (m != 1)):
            raise ValueError("argmax masks must contain only 0 and 1")
        n_changed += int(np.sum(m == 1))
        n_total += m.size
    w1 = n_changed / n_total
    return ClassWeights(w0=1.0 - w1, w1=w1)


def rebalanced_entropy(e: np.ndarray, w: ClassWeights) -> np.ndarray:
    """E' = w1 * e0 + w0 * e1 per pixel (cross pairing is intentional)."""
    return w.w1 * e[0] + w.w0 * e[1]


def margin_map(p: np.ndarray) -> np.ndarray:
    """D = |p1 - p0| per pixel."""
    return np.abs(np.asarray(p[1], dtype=np.float64) - np.asarray(p[0], dtype=np.float64))


def uncertainty_map(p: np.ndarray, w: ClassWeights) -> np.ndarray:
    """U = 1 - D * E' per pixel, as the composition of the pieces above."""
    return 1.0 - margin_map(p) * rebalanced_entropy(per_class_entropy(p), w)


def sample_uncertainty(u: np.ndarray) -> float:
    """Mean of the per-pixel score; lives in [0, 1] so it can gate random draws."""
    return float(np.mean(u))


def score_map(p: np.ndarray, w: ClassWeights, mode: str = "uncertainty") -> np.ndarray:
    """Per-pixel pseudo-label score for one of the metric ablation variants.

    entropy      raw per-pixel entropy, e0 + e1
    rebalance    class-rebalanced entropy E' alone
    confusion    margin-amplified entropy with uniform class weights
    uncertainty  the full map 1 - D * E'
    """
    e = per_class_entropy(p)
    if mode == "entropy":
        return e[0] + e[1]
    if mode == "rebalance":
        return rebalanced_entropy(e, w)
    if mode == "confusion":
        uniform = ClassWeights(0.5, 0.5)
        return margin_map(p) * rebalanced_entropy(e, uniform)
    if mode == "uncertainty":
        return 1.0 - margin_map(p) * rebalanced_entropy(e, w)
    raise ValueError(f"unknown metric mode {mode!r}; expected one of {METRIC_MODES}")

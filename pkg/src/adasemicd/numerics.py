"""Dense raster tensors, two-class probability maps, losses and metrics.

Array conventions used across the whole package:

* image rasters / logits: ``(C, H, W)`` arrays, planar channel order,
  float32 for stored imagery (logits follow the model dtype);
* probability maps: ``(2, H, W)`` float64, per-pixel probabilities that
  sum to 1 (channel 0 = unchanged, channel 1 = changed);
* label masks: ``(H, W)`` int8 with values ``{0, 1, IGNORE}``.

The loss uses the natural log; probabilities are clamped to
``[1e-7, 1 - 1e-7]`` inside the loss only, so the uncertainty metric
(base-2 entropy, see :mod:`adasemicd.uncertainty`) is unaffected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

IGNORE = np.int8(-1)

CLAMP_LO = 1e-7
CLAMP_HI = 1.0 - 1e-7

_RASTER_MAGIC = b"ASCD"


@dataclass
class ImagePair:
    """Co-registered pre/post rasters with an optional ground-truth mask."""

    img_a: np.ndarray  # (C, H, W) float32, pre-event
    img_b: np.ndarray  # (C, H, W) float32, post-event
    truth: Optional[np.ndarray] = None  # (H, W) int8 or None

    def __post_init__(self):
        if self.img_a.shape != self.img_b.shape:
            raise ValueError(
                f"temporal images differ in shape: {self.img_a.shape} vs {self.img_b.shape}"
            )
        if self.truth is not None and self.truth.shape != self.img_a.shape[1:]:
            raise ValueError(
                f"truth shape {self.truth.shape} does not match image plane {self.img_a.shape[1:]}"
            )

    @property
    def height(self) -> int:
        return self.img_a.shape[1]

    @property
    def width(self) -> int:
        return self.img_a.shape[2]

    @property
    def channels(self) -> int:
        return self.img_a.shape[0]


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def softmax(logits: np.ndarray) -> np.ndarray:
    """Two-class softmax over channel 0 of a (2, H, W) logit raster.

    Stable form: the per-pixel max is subtracted before exponentiation.
    Output is float64 and each pixel sums to 1.
    """
    if logits.ndim != 3 or logits.shape[0] != 2:
        raise ValueError(f"expected (2, H, W) logits, got {logits.shape}")
    bad = ~np.isfinite(logits)
    if bad.any():
        c, y, x = np.argwhere(bad)[0]
        raise ValueError(f"non-finite logit at channel {c}, pixel ({y}, {x})")
    z = logits.astype(np.float64, copy=False)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def cross_entropy(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean -ln(p[target]) over non-IGNORE pixels; 0.0 if every pixel is ignored."""
    _check_pred_target(pred, target)
    valid = target != IGNORE
    if not valid.any():
        return 0.0
    p_t = np.where(target == 1, pred[1], pred[0])
    p_t = np.clip(p_t[valid], CLAMP_LO, CLAMP_HI)
    return float(np.mean(-np.log(p_t)))


def cross_entropy_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of :func:`cross_entropy` w.r.t. the logits that produced `pred`.

    For non-IGNORE pixels whose target probability lies inside the clamp
    window this is the usual (p - onehot) / n_valid; pixels at the clamp
    boundary contribute zero, matching the implemented (clamped) loss so
    that finite differences of the loss agree with this gradient.
    """
    _check_pred_target(pred, target)
    valid = target != IGNORE
    g = np.zeros_like(pred)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return g
    p_t = np.where(target == 1, pred[1], pred[0])
    active = valid & (p_t > CLAMP_LO) & (p_t < CLAMP_HI)
    onehot1 = (target == 1).astype(pred.dtype)
    g[0] = (pred[0] - (1.0 - onehot1)) * active
    g[1] = (pred[1] - onehot1) * active
    return g / n_valid


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    """Pixel counts of the changed-class confusion table; IGNORE truth excluded."""
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    valid = truth != IGNORE
    p = pred[valid]
    t = truth[valid]
    pc = p == 1
    tc = t == 1
    return ConfusionCounts(
        tp=int(np.sum(pc & tc)),
        fp=int(np.sum(pc & ~tc)),
        fn=int(np.sum(~pc & tc)),
        tn=int(np.sum(~pc & ~tc)),
    )


def iou_changed(c: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); defined as 1.0 when the changed class is absent on both sides."""
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def oa(c: ConfusionCounts) -> float:
    """(TP + TN) / all evaluated pixels."""
    if c.total == 0:
        raise ValueError("overall accuracy of zero evaluated pixels is undefined")
    return (c.tp + c.tn) / c.total


def _check_pred_target(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.ndim != 3 or pred.shape[0] != 2:
        raise ValueError(f"expected (2, H, W) probabilities, got {pred.shape}")
    if target.shape != pred.shape[1:]:
        raise ValueError(f"target shape {target.shape} does not match {pred.shape[1:]}")


# --- binary raster container -------------------------------------------------
#
# magic "ASCD", then u32 little-endian height, width, channels, then
# height*width*channels float32 little-endian values in planar order
# (all of channel 0 row-major, then channel 1, ...).


def save_raster(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(raster_bytes(arr))


def raster_bytes(arr: np.ndarray) -> bytes:
    data = _as_planar(arr)
    if not np.isfinite(data).all():
        raise ValueError("raster values must be finite")
    c, h, w = data.shape
    header = _RASTER_MAGIC + struct.pack("<III", h, w, c)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def load_raster(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_raster(f)


def read_raster(f) -> np.ndarray:
    """Read one container from an open binary stream; returns (C, H, W) float32."""
    magic = f.read(4)
    if magic != _RASTER_MAGIC:
        raise ValueError(f"bad raster magic {magic!r}")
    h, w, c = struct.unpack("<III", f.read(12))
    n = h * w * c
    raw = f.read(4 * n)
    if len(raw) != 4 * n:
        raise ValueError("truncated raster container")
    data = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).astype(np.float32)
    if not np.isfinite(data).all():
        raise ValueError("raster contains non-finite values")
    return data


def _as_planar(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        return arr[None].astype(np.float32, copy=False)
    if arr.ndim == 3:
        return arr.astype(np.float32, copy=False)
    raise ValueError(f"expected (H, W) or (C, H, W) array, got shape {arr.shape}")

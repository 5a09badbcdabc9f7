"""Procedural bitemporal scenes with ground-truth change masks.

A scene is a smooth blob background shared by both temporal images; the
post image additionally gains or loses rectangular and elliptical
structures (their union is the truth mask), a global brightness offset,
and independent pixel noise. Everything is a pure function of
(scene seed, index), so datasets are reproducible element by element.

Geometric augmentation (flips, rescale, crop) is applied jointly to both
temporal images and the mask; photometric perturbations (noise,
brightness, contrast, channel dropout) touch images only. Masks resample
with nearest neighbor so labels stay in {0, 1}; images use bilinear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from .numerics import ImagePair
from .rngstreams import DATA, SPLIT, derive_rng

MAX_STRUCTURES = 64


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    channels: int = 3
    n_background_blobs: int = 6
    change_density: float = 0.05
    noise_sigma: float = 0.03
    seed: int = 0
    # restrict structures to one quadrant (0=TL, 1=TR, 2=BL, 3=BR); None = whole image
    change_quadrant: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.change_density < 0.5:
            raise ValueError("change_density must be in [0, 0.5)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.height < 4 or self.width < 4:
            raise ValueError("scene must be at least 4x4")


@dataclass
class DatasetSplit:
    labeled: List[ImagePair]
    unlabeled: List[ImagePair]  # truth kept for evaluation only, never for training
    val: List[ImagePair]


def generate_pair(spec: SceneSpec, index: int) -> ImagePair:
    """Deterministic scene number `index` under `spec`."""
    rng = derive_rng(spec.seed, DATA, index)
    h, w, c = spec.height, spec.width, spec.channels
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    base = np.full((c, h, w), 0.45, dtype=np.float64)
    for _ in range(spec.n_background_blobs):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        sig = rng.uniform(0.08, 0.25) * min(h, w)
        amp = rng.uniform(-0.25, 0.25)
        tint = rng.uniform(0.5, 1.0, size=c)
        bump = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sig * sig))
        base += tint[:, None, None] * bump

    mask = np.zeros((h, w), dtype=bool)
    delta = np.zeros((c, h, w), dtype=np.float64)
    if spec.change_density > 0.0:
        target = spec.change_density * rng.uniform(0.6, 1.4)
        for _ in range(MAX_STRUCTURES):
            if mask.mean() >= target:
                break
            shape = _draw_structure(rng, spec, yy, xx)
            mask |= shape
            sign = 1.0 if rng.random() < 0.5 else -1.0
            strength = sign * rng.uniform(0.25, 0.6)
            tint = rng.uniform(0.6, 1.0, size=c)
            delta += (strength * tint)[:, None, None] * shape

    brightness = rng.uniform(-0.05, 0.05)
    img_a = base.copy()
    img_b = base + delta + brightness
    if spec.noise_sigma > 0:
        img_a += rng.normal(0.0, spec.noise_sigma, size=(c, h, w))
        img_b += rng.normal(0.0, spec.noise_sigma, size=(c, h, w))

    return ImagePair(
        img_a=img_a.astype(np.float32),
        img_b=img_b.astype(np.float32),
        truth=mask.astype(np.int8),
    )


def _draw_structure(rng, spec: SceneSpec, yy, xx) -> np.ndarray:
    h, w = spec.height, spec.width
    y0, y1, x0, x1 = 0.0, float(h), 0.0, float(w)
    if spec.change_quadrant is not None:
        q = spec.change_quadrant
        y0, y1 = (0.0, h / 2.0) if q in (0, 1) else (h / 2.0, float(h))
        x0, x1 = (0.0, w / 2.0) if q in (0, 2) else (w / 2.0, float(w))
    cy = rng.uniform(y0, y1)
    cx = rng.uniform(x0, x1)
    ry = rng.uniform(0.03, 0.12) * (y1 - y0)
    rx = rng.uniform(0.03, 0.12) * (x1 - x0)
    if rng.random() < 0.5:
        shape = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    else:
        shape = ((yy - cy) / max(ry, 1e-9)) ** 2 + ((xx - cx) / max(rx, 1e-9)) ** 2 <= 1.0
    if spec.change_quadrant is not None:
        inside = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        shape &= inside
    return shape


def make_splits(
    spec: SceneSpec,
    n_total: int,
    label_ratio: float,
    seed: int,
    n_val: Optional[int] = None,
) -> DatasetSplit:
    """Shuffle indices by `seed`, reserve validation, split the rest by ratio.

    Validation defaults to 20% of n_total; labeled gets
    ceil(label_ratio * n_train) of the remaining training indices.
    """
    if n_total < 20:
        raise ValueError("need at least 20 scenes to split")
    if not 0.0 < label_ratio <= 1.0:
        raise ValueError("label_ratio must be in (0, 1]")
    if n_val is None:
        n_val = int(round(0.2 * n_total))
    if not 1 <= n_val <= n_total - 2:
        raise ValueError(f"degenerate validation size {n_val} for {n_total} scenes")
    n_train = n_total - n_val
    n_labeled = math.ceil(label_ratio * n_train)
    perm = derive_rng(seed, SPLIT).permutation(n_total)
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    labeled_idx = train_idx[:n_labeled]
    unlabeled_idx = train_idx[n_labeled:]
    return DatasetSplit(
        labeled=[generate_pair(spec, int(i)) for i in labeled_idx],
        unlabeled=[generate_pair(spec, int(i)) for i in unlabeled_idx],
        val=[generate_pair(spec, int(i)) for i in val_idx],
    )


# --- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class GeoParams:
    """One joint geometric transform: flips, rescale, edge-pad, crop."""

    hflip: bool
    vflip: bool
    scaled_h: int
    scaled_w: int
    off_y: int
    off_x: int
    out_h: int
    out_w: int

    @staticmethod
    def identity(h: int, w: int) -> "GeoParams":
        return GeoParams(False, False, h, w, 0, 0, h, w)


def sample_geo(
    rng: np.random.Generator,
    h: int,
    w: int,
    scale_lo: float = 0.5,
    scale_hi: float = 2.0,
) -> GeoParams:
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    s = rng.uniform(scale_lo, scale_hi)
    sh = max(1, int(round(h * s)))
    sw = max(1, int(round(w * s)))
    pad_h, pad_w = max(sh, h), max(sw, w)
    off_y = int(rng.integers(0, pad_h - h + 1))
    off_x = int(rng.integers(0, pad_w - w + 1))
    return GeoParams(hflip, vflip, sh, sw, off_y, off_x, h, w)


def apply_geo(arr: np.ndarray, gp: GeoParams, nearest: bool) -> np.ndarray:
    """Transform an (H, W) or (C, H, W) array; masks must pass nearest=True."""
    squeeze = arr.ndim == 2
    x = arr[None] if squeeze else arr
    if gp.hflip:
        x = x[:, :, ::-1]
    if gp.vflip:
        x = x[:, ::-1, :]
    x = _resize(x, gp.scaled_h, gp.scaled_w, nearest)
    pad_h = max(gp.scaled_h, gp.out_h)
    pad_w = max(gp.scaled_w, gp.out_w)
    if pad_h > gp.scaled_h or pad_w > gp.scaled_w:
        x = np.pad(x, ((0, 0), (0, pad_h - gp.scaled_h), (0, pad_w - gp.scaled_w)), mode="edge")
    x = np.ascontiguousarray(
        x[:, gp.off_y : gp.off_y + gp.out_h, gp.off_x : gp.off_x + gp.out_w]
    )
    return x[0] if squeeze else x


def apply_geo_pair(pair: ImagePair, gp: GeoParams) -> ImagePair:
    truth = None if pair.truth is None else apply_geo(pair.truth, gp, nearest=True)
    c = pair.channels
    both = apply_geo(np.concatenate([pair.img_a, pair.img_b]), gp, nearest=False)
    return ImagePair(img_a=both[:c], img_b=both[c:], truth=truth)


def weak_augment(pair: ImagePair, rng: np.random.Generator) -> ImagePair:
    """Joint flips, rescale in [0.5, 2.0], and crop back to the input size."""
    gp = sample_geo(rng, pair.height, pair.width)
    return apply_geo_pair(pair, gp)


def photometric_augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Noise, brightness, contrast about the per-channel mean, channel dropout."""
    c = img.shape[0]
    out = img.astype(np.float32, copy=True)
    out += rng.normal(0.0, 0.05, size=out.shape).astype(np.float32)
    out += np.float32(rng.uniform(-0.2, 0.2))
    contrast = np.float32(rng.uniform(0.7, 1.3))
    mean = out.mean(axis=(1, 2), keepdims=True)
    out = (out - mean) * contrast + mean
    drop = rng.random(c) < 0.1
    out[drop] = 0.0
    return out


def strong_augment(pair: ImagePair, rng: np.random.Generator) -> ImagePair:
    """Weak geometric transform plus photometric perturbation of both images."""
    view = weak_augment(pair, rng)
    return replace(
        view,
        img_a=photometric_augment(view.img_a, rng),
        img_b=photometric_augment(view.img_b, rng),
    )


def _resize(x: np.ndarray, out_h: int, out_w: int, nearest: bool) -> np.ndarray:
    c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    if nearest:
        iy = np.clip(np.round(sy), 0, h - 1).astype(np.intp)
        ix = np.clip(np.round(sx), 0, w - 1).astype(np.intp)
        return x[:, iy[:, None], ix[None, :]]
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0).astype(x.dtype)[None, :, None]
    fx = (sx - x0).astype(x.dtype)[None, None, :]
    top = x[:, y0[:, None], x0[None, :]] * (1 - fx) + x[:, y0[:, None], x1[None, :]] * fx
    bot = x[:, y1[:, None], x0[None, :]] * (1 - fx) + x[:, y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy

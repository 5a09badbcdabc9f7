"""Adaptive sample fusion.

For each unlabeled sample a window of random size is placed either on the
maximum-total-score region of its uncertainty map (mode "af") or uniformly
at random (mode "af_star"), and the window content of both temporal images
plus the supervision mask is replaced by a donor's pixels. The donor is a
labeled pair when a uniform draw exceeds the recipient's mean score,
otherwise the lowest-mean-score member of the unlabeled batch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .numerics import ImagePair

DONOR_LABELED = "labeled"
DONOR_UNLABELED = "unlabeled"
DONOR_NONE = "none"

FUSION_MODES = ("off", "af_star", "af")

FUSION_LOG_HEADER = "iter,sample_index,x,y,w,h,donor_kind,donor_index,recipient_u"


@dataclass(frozen=True)
class Region:
    """Axis-aligned window; (x, y) is the top-left pixel."""

    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class FusionDecision:
    region: Region
    donor_kind: str
    donor_index: int  # -1 when donor_kind == "none"
    recipient_u: float


def integral_image(u: np.ndarray) -> np.ndarray:
    """Summed-area table S with S[i, j] = sum of u over [0..i) x [0..j).

    Shape (H+1, W+1); any window sum is four lookups.
    """
    h, w = u.shape
    s = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.asarray(u, dtype=np.float64), axis=0, out=s[1:, 1:])
    np.cumsum(s[1:, 1:], axis=1, out=s[1:, 1:])
    return s


def window_sum(s: np.ndarray, region: Region) -> float:
    x, y, w, h = region.x, region.y, region.w, region.h
    return float(s[y + h, x + w] - s[y, x + w] - s[y + h, x] + s[y, x])


def sample_window_size(
    rng: np.random.Generator,
    height: int,
    width: int,
    ratio_lo: float = 0.25,
    ratio_hi: float = 0.5,
) -> Tuple[int, int]:
    """(w, h) drawn uniformly from the given per-dimension ratio range."""
    if not 0.0 < ratio_lo <= ratio_hi <= 1.0:
        raise ValueError(f"invalid window ratios ({ratio_lo}, {ratio_hi})")
    w = int(round(rng.uniform(ratio_lo * width, ratio_hi * width)))
    h = int(round(rng.uniform(ratio_lo * height, ratio_hi * height)))
    return max(1, min(w, width)), max(1, min(h, height))


def max_uncertainty_region(u: np.ndarray, w: int, h: int) -> Region:
    """The w x h window maximizing the summed score, stride 1.

    Ties resolve to the smallest y, then the smallest x. Uses the
    summed-area table, so the search is O(H * W).
    """
    hh, ww = u.shape
    if w > ww or h > hh or w < 1 or h < 1:
        raise ValueError(f"window {w}x{h} does not fit a {ww}x{hh} map")
    s = integral_image(u)
    ny, nx = hh - h + 1, ww - w + 1
    sums = s[h:, w:] - s[:ny, w:] - s[h:, :nx] + s[:ny, :nx]
    idx = int(np.argmax(sums))  # C order: first max is smallest y, then x
    return Region(x=idx % nx, y=idx // nx, w=w, h=h)


def choose_donor(
    recipient_u: float,
    recipient_index: int,
    batch_uncertainties: Sequence[float],
    rng: np.random.Generator,
    n_labeled: int,
    invert_threshold: bool = False,
) -> Tuple[str, int]:
    """Adaptive donor pick: labeled when a uniform draw exceeds recipient_u.

    The unlabeled donor is the batch member with the lowest mean score,
    excluding the recipient, ties to the smallest index. With
    invert_threshold the comparison flips (labeled when the draw is at or
    below recipient_u), the alternative reading of the selection rule.
    Returns (kind, index); ("none", -1) when no eligible donor exists.
    """
    r = float(rng.random())
    pick_labeled = (r <= recipient_u) if invert_threshold else (r > recipient_u)
    if pick_labeled:
        if n_labeled <= 0:
            return DONOR_NONE, -1
        return DONOR_LABELED, int(rng.integers(n_labeled))
    best: Optional[int] = None
    for k, val in enumerate(batch_uncertainties):
        if k == recipient_index:
            continue
        if best is None or val < batch_uncertainties[best]:
            best = k
    if best is None:
        return DONOR_NONE, -1
    return DONOR_UNLABELED, best


def composite_pair(recipient: ImagePair, donor: ImagePair, region: Region) -> ImagePair:
    """Recipient with the region of both temporal images replaced by the donor's."""
    if recipient.img_a.shape != donor.img_a.shape:
        raise ValueError(
            f"recipient/donor shapes differ: {recipient.img_a.shape} vs {donor.img_a.shape}"
        )
    _check_region(region, recipient.height, recipient.width)
    a = recipient.img_a.copy()
    b = recipient.img_b.copy()
    sl = (slice(None), slice(region.y, region.y + region.h), slice(region.x, region.x + region.w))
    a[sl] = donor.img_a[sl]
    b[sl] = donor.img_b[sl]
    return replace(recipient, img_a=a, img_b=b)


def composite_label(
    recipient_label: np.ndarray, donor_label: np.ndarray, region: Region
) -> np.ndarray:
    if recipient_label.shape != donor_label.shape:
        raise ValueError(
            f"label shapes differ: {recipient_label.shape} vs {donor_label.shape}"
        )
    _check_region(region, *recipient_label.shape)
    out = recipient_label.copy()
    sl = (slice(region.y, region.y + region.h), slice(region.x, region.x + region.w))
    out[sl] = donor_label[sl]
    return out


def ada_fuse_batch(
    views: Sequence[ImagePair],
    masks: Sequence[np.ndarray],
    score_maps: Sequence[np.ndarray],
    sample_scores: Sequence[float],
    labeled_views: Sequence[ImagePair],
    labeled_masks: Sequence[np.ndarray],
    rng: np.random.Generator,
    mode: str,
    ratio_lo: float = 0.25,
    ratio_hi: float = 0.5,
    invert_threshold: bool = False,
) -> Tuple[List[ImagePair], List[np.ndarray], List[FusionDecision]]:
    """Fuse every unlabeled sample; donors come from the original batch.

    Returns (fused views, fused masks, decisions). Mode "off" passes the
    batch through untouched. Each sample draws from its own spawned RNG
    stream, so per-sample results are independent of processing order.
    """
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    if mode == "off":
        return list(views), list(masks), []
    n = len(views)
    rngs = rng.spawn(n)
    fused_views: List[ImagePair] = []
    fused_masks: List[np.ndarray] = []
    decisions: List[FusionDecision] = []
    for j in range(n):
        sub = rngs[j]
        height, width = views[j].height, views[j].width
        w, h = sample_window_size(sub, height, width, ratio_lo, ratio_hi)
        if mode == "af":
            region = max_uncertainty_region(score_maps[j], w, h)
        else:
            region = Region(
                x=int(sub.integers(0, width - w + 1)),
                y=int(sub.integers(0, height - h + 1)),
                w=w,
                h=h,
            )
        kind, idx = choose_donor(
            sample_scores[j], j, sample_scores, sub, len(labeled_views), invert_threshold
        )
        if kind == DONOR_LABELED:
            donor_view, donor_mask = labeled_views[idx], labeled_masks[idx]
        elif kind == DONOR_UNLABELED:
            donor_view, donor_mask = views[idx], masks[idx]
        else:
            donor_view, donor_mask = None, None
        if donor_view is None:
            fused_views.append(views[j])
            fused_masks.append(masks[j])
        else:
            fused_views.append(composite_pair(views[j], donor_view, region))
            fused_masks.append(composite_label(masks[j], donor_mask, region))
        decisions.append(FusionDecision(region, kind, idx, float(sample_scores[j])))
    return fused_views, fused_masks, decisions


def _check_region(region: Region, height: int, width: int) -> None:
    ok = (
        region.w >= 1
        and region.h >= 1
        and 0 <= region.x
        and 0 <= region.y
        and region.x + region.w <= width
        and region.y + region.h <= height
    )
    if not ok:
        raise ValueError(f"region {region} outside a {width}x{height} image")

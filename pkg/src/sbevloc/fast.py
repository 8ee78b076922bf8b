"""FAST segment-test corners on BEV images.

A pixel ``p`` is a corner when at least ``arc`` contiguous pixels of the
16-pixel radius-3 Bresenham circle are all brighter than ``I(p) + t`` or all
darker than ``I(p) - t``. Its score is, over the maximal qualifying runs,
the largest ``sum(|I(q) - I(p)| - t)``; each run is summed in circle order
from its first pixel (from pixel 0 when the whole circle qualifies).

Corners are ranked by ``(score desc, row asc, col asc)`` and greedily
suppressed: a corner is dropped when an already accepted one lies within
Chebyshev distance ``nms_radius``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sbevloc import kernels
from sbevloc.bev import BevImage
from sbevloc.errors import ImageTooSmall

MARGIN = 3


@dataclass(frozen=True, order=True)
class Keypoint:
    row: int
    col: int
    score: float = 0.0


@dataclass(frozen=True)
class FastConfig:
    threshold: float = 0.08
    arc: int = 9
    nms_radius: int = 3
    max_keypoints: int = 500


def _as_array(img) -> np.ndarray:
    return img.pixels if isinstance(img, BevImage) else np.asarray(img, dtype=np.float64)


def corner_scores(img, threshold: float, arc: int) -> np.ndarray:
    px = _as_array(img)
    if px.shape[0] < 7 or px.shape[1] < 7:
        raise ImageTooSmall(f"FAST needs at least 7x7 pixels, got {px.shape}")
    if not 9 <= arc <= 12:
        raise ValueError("arc must be in [9, 12]")
    return kernels.fast_scores(px, threshold, arc)


def detect_fast(
    img,
    threshold: float = 0.08,
    arc: int = 9,
    nms_radius: int = 3,
    max_keypoints: int = 500,
) -> list[Keypoint]:
    scores = corner_scores(img, threshold, arc)
    rows, cols = np.nonzero(scores)
    vals = scores[rows, cols]
    order = np.lexsort((cols, rows, -vals))
    rows, cols, vals = rows[order], cols[order], vals[order]
    keep = kernels.nms_greedy(rows, cols, scores.shape, nms_radius, max_keypoints)
    return [Keypoint(int(rows[i]), int(cols[i]), float(vals[i])) for i in keep]


def detect(img, cfg: FastConfig = FastConfig()) -> list[Keypoint]:
    return detect_fast(img, cfg.threshold, cfg.arc, cfg.nms_radius, cfg.max_keypoints)


def keypoint_array(kps: list[Keypoint]) -> np.ndarray:
    """``(N, 2)`` integer array of ``(row, col)``."""
    return np.array([(k.row, k.col) for k in kps], dtype=np.int64).reshape(-1, 2)

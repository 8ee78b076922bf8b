"""Training triplets mined from a single BEV image.

Candidate patch centers come from FAST corners (or one of two ablation
strategies). For a query center, geometric distance to the other candidates
is the pixel distance scaled by the image resolution; candidates closer than
``d_th`` are positives, the rest negatives. Patches of ``r x r`` pixels are
cropped around the chosen centers with zero padding and then augmented.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sbevloc.bev import BevImage, flip_horizontal, rotate_image
from sbevloc.errors import NoValidQuery
from sbevloc.fast import FastConfig, Keypoint, detect, keypoint_array

STRATEGIES = ("fast", "random", "longitudinal")
AUGMENTATIONS = ("none", "rotate", "rotate_flip")
N_RANDOM_CANDIDATES = 200
LONGITUDINAL_JITTER = 3


@dataclass(frozen=True)
class TripletConfig:
    d_th: float = 5.0
    m_negatives: int = 10
    patch_size: int = 200
    strategy: str = "fast"
    augment: str = "rotate"

    def __post_init__(self):
        if self.d_th <= 0 or self.m_negatives < 1 or self.patch_size < 1:
            raise ValueError("invalid triplet configuration")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.augment not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.augment!r}")


@dataclass(frozen=True)
class CenterTriplet:
    query: Keypoint
    positive: Keypoint
    negatives: tuple[Keypoint, ...]


@dataclass(frozen=True, eq=False)
class PatchTriplet:
    query_patch: BevImage
    positive_patch: BevImage
    negative_patches: tuple[BevImage, ...]
    centers: CenterTriplet

    def stack(self) -> np.ndarray:
        """All patches as one ``(m + 2, r, r)`` array: query, positive, negatives."""
        return np.stack(
            [self.query_patch.pixels, self.positive_patch.pixels]
            + [p.pixels for p in self.negative_patches]
        )

    def __eq__(self, other):
        return (
            isinstance(other, PatchTriplet)
            and self.centers == other.centers
            and np.array_equal(self.stack(), other.stack())
        )


def geo_distance(a: Keypoint, b: Keypoint, resolution: float) -> float:
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    return math.hypot(a.row - b.row, a.col - b.col) * resolution


def select_candidates(
    img: BevImage,
    strategy: str = "fast",
    rng_seed: int = 0,
    fast_cfg: FastConfig = FastConfig(),
) -> list[Keypoint]:
    h, w = img.shape
    if strategy == "fast":
        return detect(img, fast_cfg)
    rng = np.random.default_rng(rng_seed)
    lo_r, hi_r = 3, h - 3
    lo_c, hi_c = 3, w - 3
    if strategy == "random":
        rows = rng.integers(lo_r, hi_r, size=N_RANDOM_CANDIDATES)
        cols = rng.integers(lo_c, hi_c, size=N_RANDOM_CANDIDATES)
    elif strategy == "longitudinal":
        # Sensor forward (+x) runs along the columns of the center row.
        cols = rng.integers(lo_c, hi_c, size=N_RANDOM_CANDIDATES)
        jitter = rng.integers(-LONGITUDINAL_JITTER, LONGITUDINAL_JITTER + 1, size=N_RANDOM_CANDIDATES)
        rows = np.clip(h // 2 + jitter, lo_r, hi_r - 1)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return [Keypoint(int(r), int(c), 0.0) for r, c in zip(rows, cols)]


def crop_patch(img: BevImage, center: Keypoint, r: int) -> BevImage:
    if r < 1:
        raise ValueError("patch size must be >= 1")
    h, w = img.shape
    r0 = center.row - r // 2
    c0 = center.col - r // 2
    out = np.zeros((r, r))
    sr0, sr1 = max(r0, 0), min(r0 + r, h)
    sc0, sc1 = max(c0, 0), min(c0 + r, w)
    if sr0 < sr1 and sc0 < sc1:
        out[sr0 - r0:sr1 - r0, sc0 - c0:sc1 - c0] = img.pixels[sr0:sr1, sc0:sc1]
    return BevImage(out, img.resolution)


def _augment(patch: BevImage, mode: str, rng: np.random.Generator) -> BevImage:
    if mode == "none":
        return patch
    angle = rng.uniform(0.0, 2.0 * math.pi)
    flip = rng.random() < 0.5
    out = rotate_image(patch, angle, "bilinear")
    if mode == "rotate_flip" and flip:
        out = flip_horizontal(out)
    return out


def mine_centers(
    candidates: list[Keypoint], resolution: float, cfg: TripletConfig, rng: np.random.Generator
) -> CenterTriplet:
    n = len(candidates)
    if n < cfg.m_negatives + 2:
        raise NoValidQuery(f"{n} candidates cannot form a triplet with m={cfg.m_negatives}")
    pts = keypoint_array(candidates).astype(np.float64)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1]) * resolution
    near = dist < cfg.d_th
    np.fill_diagonal(near, False)
    far = dist >= cfg.d_th
    valid = np.nonzero(near.any(axis=1) & (far.sum(axis=1) >= cfg.m_negatives))[0]
    if len(valid) == 0:
        raise NoValidQuery("no candidate admits a positive and enough negatives")
    q = int(valid[rng.integers(len(valid))])
    pos_pool = np.nonzero(near[q])[0]
    neg_pool = np.nonzero(far[q])[0]
    p = int(pos_pool[rng.integers(len(pos_pool))])
    negs = rng.choice(neg_pool, size=cfg.m_negatives, replace=False)
    return CenterTriplet(candidates[q], candidates[p], tuple(candidates[int(j)] for j in negs))


def generate_triplet(
    img: BevImage,
    cfg: TripletConfig = TripletConfig(),
    rng_seed: int = 0,
    candidates: list[Keypoint] | None = None,
    fast_cfg: FastConfig = FastConfig(),
) -> PatchTriplet:
    """Mine one patch triplet from ``img``.

    ``candidates`` may be passed in when the caller caches them; otherwise
    they are selected with ``cfg.strategy``.
    """
    if candidates is None:
        candidates = select_candidates(img, cfg.strategy, rng_seed, fast_cfg)
    rng = np.random.default_rng([rng_seed, 1])
    centers = mine_centers(candidates, img.resolution, cfg, rng)
    r = cfg.patch_size
    patches = [crop_patch(img, c, r) for c in (centers.query, centers.positive, *centers.negatives)]
    patches = [_augment(p, cfg.augment, rng) for p in patches]
    return PatchTriplet(patches[0], patches[1], tuple(patches[2:]), centers)

"""Bird's-eye-view density images.

Cell ``(r, c)`` covers ``x in [-E + c*v, -E + (c+1)*v)`` and
``y in (E - (r+1)*v, E - r*v]`` for half-extent ``E`` and voxel size ``v``,
so columns grow with ``x`` (sensor forward) and rows grow with ``-y``.
Intensity is the number of voxel-filtered points in the cell, saturated at
``saturation_count`` and scaled to [0, 1].

Rotations act about the geometric center of the pixel grid,
``((H-1)/2, (W-1)/2)``, which is exactly the sensor origin under the cell
formula above. Positive angles rotate the scene counter-clockwise in the
metric frame. Multiples of pi/2 are exact pixel permutations; other angles
use bilinear sampling expressed as a sparse linear operator so the same
operator (and its transpose) serves forward and backward passes.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from sbevloc.dataset_io import PointCloud


@dataclass(frozen=True)
class BevConfig:
    extent: float = 40.0
    voxel: float = 0.4
    saturation_count: int = 8
    z_min: float = -3.0
    z_max: float = 8.0

    def __post_init__(self):
        if self.extent <= 0 or self.voxel <= 0:
            raise ValueError("extent and voxel must be positive")
        if self.saturation_count < 1:
            raise ValueError("saturation_count must be >= 1")
        cells = 2.0 * self.extent / self.voxel
        if abs(cells - round(cells)) > 1e-9:
            raise ValueError(f"2*extent/voxel = {cells} is not an integer")

    @property
    def size(self) -> int:
        return int(round(2.0 * self.extent / self.voxel))


@dataclass(frozen=True, eq=False)
class BevImage:
    pixels: np.ndarray
    resolution: float

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("BEV pixels must be 2D")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        return (
            isinstance(other, BevImage)
            and self.resolution == other.resolution
            and np.array_equal(self.pixels, other.pixels)
        )


def voxel_filter(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    Output order follows the lexicographic order of voxel indices.
    """
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    if len(cloud) == 0:
        return cloud
    idx = np.floor(cloud.xyz / voxel).astype(np.int64)
    _, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = len(counts)
    centroid = np.column_stack(
        [np.bincount(inverse, weights=cloud.xyz[:, k], minlength=n) for k in range(3)]
    ) / counts[:, None]
    refl = None
    if cloud.reflectance is not None:
        refl = np.bincount(inverse, weights=cloud.reflectance, minlength=n) / counts
    return PointCloud(centroid, refl)


def cell_indices(xy: np.ndarray, cfg: BevConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row and column of each (N, 2) metric point under the cell formula."""
    n = cfg.size
    cols = np.floor((xy[:, 0] + cfg.extent) / cfg.voxel).astype(np.int64)
    rows = np.floor((cfg.extent - xy[:, 1]) / cfg.voxel).astype(np.int64)
    return np.clip(rows, 0, n - 1), np.clip(cols, 0, n - 1)


def project(cloud: PointCloud, cfg: BevConfig = BevConfig()) -> BevImage:
    n = cfg.size
    img = np.zeros((n, n))
    if len(cloud):
        p = cloud.xyz
        keep = (
            (np.abs(p[:, 0]) < cfg.extent)
            & (np.abs(p[:, 1]) < cfg.extent)
            & (p[:, 2] >= cfg.z_min)
            & (p[:, 2] <= cfg.z_max)
        )
        filtered = voxel_filter(PointCloud(p[keep]), cfg.voxel)
        if len(filtered):
            rows, cols = cell_indices(filtered.xyz[:, :2], cfg)
            counts = np.bincount(rows * n + cols, minlength=n * n).reshape(n, n)
            img = np.minimum(counts, cfg.saturation_count) / cfg.saturation_count
    return BevImage(img, cfg.voxel)


def pixel_to_metric(rows, cols, shape: tuple[int, int], resolution: float) -> np.ndarray:
    """Metric (x, y) of pixel centers, sensor at the grid center."""
    h, w = shape
    x = (np.asarray(cols, dtype=np.float64) - (w - 1) / 2.0) * resolution
    y = ((h - 1) / 2.0 - np.asarray(rows, dtype=np.float64)) * resolution
    return np.column_stack([x, y])


def quarter_turns(angle: float) -> int | None:
    """``k`` if ``angle`` is ``k * pi/2`` (mod 2 pi) to 1e-12, else None."""
    k = round(angle / (math.pi / 2.0))
    if abs(angle - k * math.pi / 2.0) < 1e-12:
        return k % 4
    return None


@lru_cache(maxsize=256)
def _bilinear_operator(h: int, w: int, angle: float) -> sp.csr_matrix:
    rc, cc = (h - 1) / 2.0, (w - 1) / 2.0
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xo = (c - cc).ravel()
    yo = (rc - r).ravel()
    ca, sa = math.cos(angle), math.sin(angle)
    # Output pixel samples the source at the inversely rotated location.
    xs = ca * xo + sa * yo
    ys = -sa * xo + ca * yo
    src_r = rc - ys
    src_c = cc + xs
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    out_idx = np.arange(h * w)
    rows, cols, vals = [], [], []
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                       (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc_ = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < h) & (cc_ >= 0) & (cc_ < w) & (wt > 0)
        rows.append(out_idx[ok])
        cols.append(rr[ok] * w + cc_[ok])
        vals.append(wt[ok])
    m = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w)
    )
    m.sum_duplicates()
    return m


def rotate_array(x: np.ndarray, angle: float, interpolation: str = "bilinear") -> np.ndarray:
    """Rotate arrays shaped ``(..., H, W)`` or ``(B, H, W, C)`` spatially.

    ``x.ndim == 2`` is an image; ``x.ndim == 3`` a batch of images
    ``(B, H, W)``; ``x.ndim == 4`` a batch of channel-last maps.
    """
    axes = (0, 1) if x.ndim == 2 else (1, 2)
    k = quarter_turns(angle)
    if k is not None:
        return np.ascontiguousarray(np.rot90(x, k, axes=axes))
    h, w = x.shape[axes[0]], x.shape[axes[1]]
    if h != w:
        raise ValueError("rotation requires square images")
    if interpolation == "nearest":
        return _rotate_nearest(x, angle, axes)
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    return apply_operator(_bilinear_operator(h, w, float(angle)), x)


def rotate_array_transpose(g: np.ndarray, angle: float) -> np.ndarray:
    """Adjoint of :func:`rotate_array` (bilinear), for backpropagation."""
    axes = (0, 1) if g.ndim == 2 else (1, 2)
    k = quarter_turns(angle)
    if k is not None:
        return np.ascontiguousarray(np.rot90(g, -k, axes=axes))
    h, w = g.shape[axes[0]], g.shape[axes[1]]
    return apply_operator(_bilinear_adjoint(h, w, float(angle)), g)


@lru_cache(maxsize=256)
def _bilinear_adjoint(h: int, w: int, angle: float) -> sp.csr_matrix:
    return _bilinear_operator(h, w, angle).T.tocsr()


def apply_operator(m: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        h, w = x.shape
        return (m @ x.ravel()).reshape(h, w)
    if x.ndim == 3:
        b, h, w = x.shape
        flat = x.reshape(b, h * w).T
        return np.ascontiguousarray((m @ flat).T.reshape(b, h, w))
    b, h, w, c = x.shape
    flat = x.transpose(1, 2, 0, 3).reshape(h * w, b * c)
    out = (m @ flat).reshape(h, w, b, c).transpose(2, 0, 1, 3)
    return np.ascontiguousarray(out)


def _rotate_nearest(x, angle, axes):
    h, w = x.shape[axes[0]], x.shape[axes[1]]
    rc, cc = (h - 1) / 2.0, (w - 1) / 2.0
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xo, yo = c - cc, rc - r
    ca, sa = math.cos(angle), math.sin(angle)
    src_r = np.rint(rc - (-sa * xo + ca * yo)).astype(np.int64)
    src_c = np.rint(cc + (ca * xo + sa * yo)).astype(np.int64)
    ok = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    sr, sc = np.where(ok, src_r, 0), np.where(ok, src_c, 0)
    if x.ndim == 2:
        return np.where(ok, x[sr, sc], 0.0)
    moved = np.moveaxis(x, axes, (0, 1))[sr, sc]
    mask = ok.reshape(ok.shape + (1,) * (moved.ndim - 2))
    return np.ascontiguousarray(np.moveaxis(np.where(mask, moved, 0.0), (0, 1), axes))


def rotate_image(img: BevImage, angle: float, interpolation: str = "bilinear") -> BevImage:
    if img.shape[0] != img.shape[1]:
        raise ValueError("rotation requires a square image")
    return BevImage(rotate_array(img.pixels, angle, interpolation), img.resolution)


def flip_horizontal(img: BevImage) -> BevImage:
    return BevImage(np.ascontiguousarray(img.pixels[:, ::-1]), img.resolution)


def to_pgm_bytes(img: BevImage) -> bytes:
    h, w = img.shape
    data = np.floor(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def save_pgm(path: str | os.PathLike, img: BevImage) -> None:
    Path(path).write_bytes(to_pgm_bytes(img))


def load_pgm(path: str | os.PathLike, resolution: float) -> BevImage:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    header_len = len(b" ".join(parts[:4])) + 1
    data = np.frombuffer(raw[header_len:header_len + w * h], dtype=np.uint8).reshape(h, w)
    return BevImage(data / 255.0, resolution)

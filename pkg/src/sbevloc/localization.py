"""Keyframe database, place retrieval and SE(2) pose estimation.

Pixel coordinates enter RANSAC in a centered, y-up frame
(``u = col - (W-1)/2``, ``v = (H-1)/2 - row``) so that a rigid transform in
pixels maps to a metric transform by scaling the translation by the
resolution.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from sbevloc import container
from sbevloc.bev import BevConfig, BevImage, project
from sbevloc.dataset_io import PointCloud, PoseSE2
from sbevloc.errors import (
    CheckpointError,
    EmptyDatabase,
    EmptyTrajectory,
    NoConsensus,
    OutOfBounds,
    ShapeMismatch,
    TooFewCorrespondences,
)
from sbevloc.fast import FastConfig, Keypoint, detect, keypoint_array
from sbevloc.model import ModelParams, describe_batch

DB_MAGIC = b"SBEVLDB\0"
DB_VERSION = 1
KEYFRAME_SPACING = 1.0
_NORM_EPS = 1e-12
_SPACING_TOL = 1e-9


@dataclass(frozen=True)
class LocConfig:
    inlier_threshold: float = 2.0
    max_iters: int = 500
    min_inliers: int = 4
    keyframe_spacing: float = KEYFRAME_SPACING
    ratio_test: float = 0.0  # 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0 or self.max_iters < 1 or self.min_inliers < 2:
            raise ValueError("invalid localization configuration")


@dataclass(frozen=True, eq=False)
class DatabaseEntry:
    bev: BevImage
    pose: PoseSE2
    descriptor: np.ndarray
    keypoints: tuple[Keypoint, ...]
    local_features: np.ndarray  # (n_kp, C)
    source_index: int = -1


@dataclass(frozen=True, eq=False)
class LocalizationDatabase:
    entries: tuple[DatabaseEntry, ...]

    def __post_init__(self):
        if self.entries:
            object.__setattr__(self, "_desc", np.stack([e.descriptor for e in self.entries]))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def descriptors(self) -> np.ndarray:
        if not self.entries:
            raise EmptyDatabase("database has no entries")
        return self._desc

    @property
    def poses(self) -> list[PoseSE2]:
        return [e.pose for e in self.entries]

    def to_bytes(self) -> bytes:
        meta = {"entries": str(len(self.entries))}
        tensors = []
        for i, e in enumerate(self.entries):
            meta[f"e{i}.resolution"] = repr(e.bev.resolution)
            meta[f"e{i}.source"] = str(e.source_index)
            tensors += [
                (f"e{i}.bev", e.bev.pixels),
                (f"e{i}.pose", np.array([e.pose.x, e.pose.y, e.pose.yaw])),
                (f"e{i}.descriptor", e.descriptor),
                (f"e{i}.keypoints", np.array([[k.row, k.col, k.score] for k in e.keypoints]).reshape(-1, 3)),
                (f"e{i}.features", e.local_features),
            ]
        return container.encode(DB_MAGIC, DB_VERSION, meta, tensors)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "LocalizationDatabase":
        version, meta, t = container.decode(raw, DB_MAGIC)
        if version != DB_VERSION:
            raise CheckpointError(f"unsupported database version {version}")
        try:
            entries = []
            for i in range(int(meta["entries"])):
                p = t[f"e{i}.pose"]
                kps = tuple(Keypoint(int(r), int(c), float(s)) for r, c, s in t[f"e{i}.keypoints"])
                entries.append(DatabaseEntry(
                    BevImage(t[f"e{i}.bev"], float(meta[f"e{i}.resolution"])),
                    PoseSE2(float(p[0]), float(p[1]), float(p[2])),
                    t[f"e{i}.descriptor"], kps, t[f"e{i}.features"], int(meta[f"e{i}.source"]),
                ))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"malformed database: {exc}") from None
        return cls(tuple(entries))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LocalizationDatabase":
        return cls.from_bytes(Path(path).read_bytes())


def select_keyframes(poses: Sequence[PoseSE2], spacing: float = KEYFRAME_SPACING) -> list[int]:
    """Indices kept by the spacing rule, measured along the trajectory."""
    if len(poses) == 0:
        raise EmptyTrajectory("no poses")
    keep = [0]
    travelled = 0.0
    for i in range(1, len(poses)):
        travelled += poses[i].distance_to(poses[i - 1])
        if travelled >= spacing - _SPACING_TOL:
            keep.append(i)
            travelled = 0.0
    return keep


def sample_local_feature(fmap: np.ndarray, kp: Keypoint) -> np.ndarray:
    h, w = fmap.shape[:2]
    if not (0 <= kp.row < h and 0 <= kp.col < w):
        raise OutOfBounds(f"keypoint ({kp.row}, {kp.col}) outside {h}x{w} feature map")
    v = np.asarray(fmap[kp.row, kp.col], dtype=np.float64)
    return v / max(float(np.linalg.norm(v)), _NORM_EPS)


def local_features(fmap: np.ndarray, kps: Sequence[Keypoint]) -> np.ndarray:
    if not kps:
        return np.zeros((0, fmap.shape[-1]))
    return np.stack([sample_local_feature(fmap, k) for k in kps])


def _describe_entry(img: BevImage, params: ModelParams, fast_cfg: FastConfig):
    desc, fmaps, _ = describe_batch(img.pixels[None], params)
    kps = tuple(detect(img, fast_cfg))
    return desc[0], kps, local_features(fmaps[0], kps)


def _as_image(scan, bev_cfg: BevConfig) -> BevImage:
    return scan if isinstance(scan, BevImage) else project(scan, bev_cfg)


def build_database(
    scans: Sequence[PointCloud | BevImage],
    poses: Sequence[PoseSE2],
    params: ModelParams,
    bev_cfg: BevConfig = BevConfig(),
    fast_cfg: FastConfig = FastConfig(),
    loc_cfg: LocConfig = LocConfig(),
) -> LocalizationDatabase:
    if len(scans) != len(poses):
        raise ShapeMismatch(f"{len(scans)} scans but {len(poses)} poses")
    keep = select_keyframes(poses, loc_cfg.keyframe_spacing)
    entries = []
    for i in keep:
        img = _as_image(scans[i], bev_cfg)
        desc, kps, feats = _describe_entry(img, params, fast_cfg)
        entries.append(DatabaseEntry(img, poses[i], desc, kps, feats, i))
    return LocalizationDatabase(tuple(entries))


def retrieve(query: np.ndarray, db: LocalizationDatabase | np.ndarray) -> tuple[int, float]:
    """Exhaustive nearest descriptor; ``np.argmin`` keeps the lowest index on ties."""
    descs = db.descriptors if isinstance(db, LocalizationDatabase) else np.asarray(db)
    if descs.size == 0:
        raise EmptyDatabase("database has no entries")
    d = np.linalg.norm(descs - np.asarray(query)[None, :], axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)


def match_features(q_feats: np.ndarray, d_feats: np.ndarray, ratio: float = 0.0) -> list[tuple[int, int]]:
    """Mutual nearest neighbors, optionally filtered by a ratio test."""
    q_feats, d_feats = np.asarray(q_feats), np.asarray(d_feats)
    if len(q_feats) == 0 or len(d_feats) == 0:
        return []
    dist = _pairwise(q_feats, d_feats)
    fwd = np.argmin(dist, axis=1)
    bwd = np.argmin(dist, axis=0)
    pairs = []
    for i, j in enumerate(fwd):
        if bwd[j] != i:
            continue
        if ratio > 0 and dist.shape[1] > 1:
            second = np.partition(dist[i], 1)[1]
            if dist[i, j] >= ratio * second:
                continue
        pairs.append((i, int(j)))
    return pairs


def pixel_coords(kps: Sequence[Keypoint] | np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Keypoints as centered, y-up ``(u, v)`` pixel coordinates."""
    h, w = shape
    rc = keypoint_array(kps) if not isinstance(kps, np.ndarray) else kps
    rc = np.asarray(rc, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([rc[:, 1] - (w - 1) / 2.0, (h - 1) / 2.0 - rc[:, 0]])


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> PoseSE2:
    """Least-squares rotation and translation taking ``src`` onto ``dst``."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    theta = math.atan2(float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])),
                       float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])))
    c, s = math.cos(theta), math.sin(theta)
    tx = md[0] - (c * ms[0] - s * ms[1])
    ty = md[1] - (s * ms[0] + c * ms[1])
    return PoseSE2(float(tx), float(ty), theta)


def ransac_se2(
    src: np.ndarray,
    dst: np.ndarray,
    inlier_threshold: float = 2.0,
    max_iters: int = 500,
    rng_seed: int = 0,
    min_inliers: int = 4,
) -> tuple[PoseSE2, np.ndarray]:
    """Robust 2D rigid fit of ``src -> dst`` (both ``(N, 2)``, pixels).

    Hypotheses come from two-point samples; the best one maximizes the
    inlier count, breaking ties by lower inlier RMS, and is refit on all its
    inliers.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n != len(dst):
        raise ShapeMismatch("src and dst differ in length")
    if n < 2:
        raise TooFewCorrespondences(f"{n} correspondences, need at least 2")
    rng = np.random.default_rng(rng_seed)
    first = rng.integers(0, n, size=max_iters)
    second = (first + rng.integers(1, n, size=max_iters)) % n
    a = src[second] - src[first]
    b = dst[second] - dst[first]
    theta = np.arctan2(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0], a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    c, s = np.cos(theta), np.sin(theta)
    mid_s = 0.5 * (src[first] + src[second])
    mid_d = 0.5 * (dst[first] + dst[second])
    tx = mid_d[:, 0] - (c * mid_s[:, 0] - s * mid_s[:, 1])
    ty = mid_d[:, 1] - (s * mid_s[:, 0] + c * mid_s[:, 1])
    px = c[:, None] * src[None, :, 0] - s[:, None] * src[None, :, 1] + tx[:, None]
    py = s[:, None] * src[None, :, 0] + c[:, None] * src[None, :, 1] + ty[:, None]
    err = np.hypot(px - dst[None, :, 0], py - dst[None, :, 1])
    inl = err < inlier_threshold
    counts = inl.sum(axis=1)
    sq = np.where(inl, err * err, 0.0).sum(axis=1)
    rms = np.sqrt(sq / np.maximum(counts, 1))
    best = int(np.lexsort((rms, -counts))[0])
    if counts[best] < min_inliers:
        raise NoConsensus(f"best hypothesis has {int(counts[best])} inliers, need {min_inliers}")
    mask = inl[best].copy()
    return fit_rigid(src[mask], dst[mask]), mask


@dataclass(frozen=True)
class MatchResult:
    matched_index: int
    descriptor_distance: float
    correspondences: tuple[tuple[Keypoint, Keypoint], ...]
    t_rel: PoseSE2
    t_global: PoseSE2
    inlier_count: int
    pose_ok: bool = True
    database_pose: PoseSE2 = field(default_factory=PoseSE2.identity)

    def csv_row(self, query_id) -> list:
        g = self.t_global
        return [query_id, self.matched_index, repr(self.descriptor_distance),
                repr(g.x), repr(g.y), repr(g.yaw), self.inlier_count]


CSV_HEADER = ["query_id", "match_id", "desc_distance", "tx", "ty", "yaw", "inliers"]


def results_csv(rows: Sequence[tuple[object, MatchResult]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for qid, res in rows:
        w.writerow(res.csv_row(qid))
    return buf.getvalue()


def localize(
    scan: PointCloud | BevImage,
    db: LocalizationDatabase,
    params: ModelParams,
    bev_cfg: BevConfig = BevConfig(),
    fast_cfg: FastConfig = FastConfig(),
    loc_cfg: LocConfig = LocConfig(),
) -> MatchResult:
    """Retrieve the nearest keyframe and estimate the query's global pose.

    When RANSAC finds no consensus the retrieval is still returned, with the
    matched keyframe pose as the global estimate and ``pose_ok`` False.
    """
    if len(db) == 0:
        raise EmptyDatabase("database has no entries")
    img = _as_image(scan, bev_cfg)
    desc, kps, feats = _describe_entry(img, params, fast_cfg)
    idx, dist = retrieve(desc, db)
    entry = db.entries[idx]
    pairs = match_features(feats, entry.local_features, loc_cfg.ratio_test)
    corr = tuple((kps[i], entry.keypoints[j]) for i, j in pairs)
    try:
        if not corr:
            raise TooFewCorrespondences("no feature matches")
        src = pixel_coords([q for q, _ in corr], img.shape)
        dst = pixel_coords([d for _, d in corr], entry.bev.shape)
        t_px, mask = ransac_se2(src, dst, loc_cfg.inlier_threshold, loc_cfg.max_iters,
                                loc_cfg.seed, loc_cfg.min_inliers)
    except (TooFewCorrespondences, NoConsensus):
        return MatchResult(idx, dist, corr, PoseSE2.identity(), entry.pose, 0, False, entry.pose)
    res = img.resolution
    t_rel = PoseSE2(t_px.x * res, t_px.y * res, t_px.yaw)
    return MatchResult(idx, dist, corr, t_rel, entry.pose @ t_rel, int(mask.sum()), True, entry.pose)

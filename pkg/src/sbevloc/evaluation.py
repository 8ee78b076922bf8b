"""Place-recognition and localization metrics, loop-closure protocol, reports.

A PR curve sweeps the acceptance threshold over every distinct descriptor
distance. Queries with no true match within the positive radius still count
toward precision when accepted, but never toward recall.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sbevloc.bev import BevImage
from sbevloc.dataset_io import PoseSE2, yaw_difference
from sbevloc.errors import (
    EmptyResults,
    NoConsensus,
    NoPositives,
    SequenceTooShort,
    TooFewCorrespondences,
)
from sbevloc.fast import FastConfig, detect
from sbevloc.localization import LocConfig, local_features, match_features, pixel_coords, ransac_se2
from sbevloc.model import ModelParams, describe_batch


@dataclass(frozen=True)
class EvalConfig:
    positive_radius: float = 5.0
    loc_success_trans: float = 2.0
    loc_success_rot: float = 5.0  # degrees
    exclusion_window: int = 100

    def __post_init__(self):
        if min(self.positive_radius, self.loc_success_trans, self.loc_success_rot) <= 0 or self.exclusion_window <= 0:
            raise ValueError("evaluation settings must be positive")


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float


@dataclass(frozen=True)
class PrResult:
    points: tuple[PrPoint, ...]
    ap: float
    max_f1: float
    r_percent: float


def recall_at_1(pairs: Sequence[tuple[PoseSE2, PoseSE2]], cfg: EvalConfig = EvalConfig()) -> float:
    """Percentage of (query pose, matched pose) pairs closer than the radius."""
    if len(pairs) == 0:
        raise EmptyResults("no retrieval results")
    hits = sum(q.distance_to(m) < cfg.positive_radius for q, m in pairs)
    return 100.0 * hits / len(pairs)


def pr_curve(scored: Sequence[tuple[float, bool, bool]]) -> PrResult:
    """PR sweep over ``(distance, positive_possible, correct)`` triples."""
    if len(scored) == 0:
        raise EmptyResults("no scored queries")
    dist = np.array([float(s[0]) for s in scored])
    possible = np.array([bool(s[1]) for s in scored])
    correct = np.array([bool(s[2]) for s in scored]) & possible
    n_pos = int(possible.sum())
    if n_pos == 0:
        raise NoPositives("no query has a true match within the positive radius")
    points = []
    for thr in np.unique(dist):
        acc = dist <= thr
        tp = int(np.sum(acc & correct))
        points.append(PrPoint(float(thr), tp / int(acc.sum()), tp / n_pos))
    ap, prev = 0.0, 0.0
    for p in sorted(points, key=lambda p: p.recall):
        ap += (p.recall - prev) * p.precision
        prev = p.recall
    f1 = [2 * p.precision * p.recall / (p.precision + p.recall) for p in points if p.precision + p.recall > 0]
    exact = [p.recall for p in points if p.precision == 1.0]
    return PrResult(tuple(points), ap, max(f1, default=0.0), 100.0 * max(exact, default=0.0))


@dataclass(frozen=True)
class LocRecord:
    query_pose: PoseSE2
    matched_pose: PoseSE2
    estimate: PoseSE2
    pose_ok: bool = True


@dataclass(frozen=True)
class LocSummary:
    recall: float
    success_rate: float
    mean_trans_error: float
    mean_rot_error: float  # degrees
    n_queries: int
    n_recognized: int
    n_posed: int


def pose_errors(estimate: PoseSE2, truth: PoseSE2) -> tuple[float, float]:
    """Planar translation error (m) and absolute yaw error (degrees)."""
    return estimate.distance_to(truth), math.degrees(yaw_difference(estimate.yaw, truth.yaw))


def localization_eval(records: Sequence[LocRecord], cfg: EvalConfig = EvalConfig()) -> LocSummary:
    """Recall, success rate and mean errors over recognized, posed queries.

    A query without RANSAC consensus counts against the success rate but
    is left out of the error means.
    """
    if len(records) == 0:
        raise EmptyResults("no localization results")
    success, recognized, et, er = 0, 0, [], []
    for rec in records:
        e_t, e_r = pose_errors(rec.estimate, rec.query_pose)
        if rec.pose_ok and e_t < cfg.loc_success_trans and e_r < cfg.loc_success_rot:
            success += 1
        if rec.query_pose.distance_to(rec.matched_pose) < cfg.positive_radius:
            recognized += 1
            if rec.pose_ok:
                et.append(e_t)
                er.append(e_r)
    n = len(records)
    return LocSummary(
        100.0 * recognized / n, 100.0 * success / n,
        float(np.mean(et)) if et else float("nan"), float(np.mean(er)) if er else float("nan"),
        n, recognized, len(et),
    )


def describe_all(images: Sequence[BevImage], params: ModelParams, batch: int = 16):
    """Descriptors ``(N, D)`` and REM feature maps for a list of images."""
    descs, fmaps = [], []
    for s in range(0, len(images), batch):
        d, f, _ = describe_batch(np.stack([im.pixels for im in images[s:s + batch]]), params)
        descs.append(d)
        fmaps.extend(f)
    return np.vstack(descs), fmaps


@dataclass
class LoopReport:
    pr: PrResult | None
    n_queries: int
    n_possible: int
    mean_trans_error: float
    mean_rot_error: float
    rows: list[tuple[int, int, float, bool, bool]] = field(default_factory=list)
    error: str | None = None


def relative_pose(
    img_q: BevImage, fmap_q, img_d: BevImage, fmap_d, fast_cfg: FastConfig, loc_cfg: LocConfig
) -> PoseSE2 | None:
    """Metric pose of ``img_q`` in the frame of ``img_d``, or None on failure."""
    kq, kd = detect(img_q, fast_cfg), detect(img_d, fast_cfg)
    pairs = match_features(local_features(fmap_q, kq), local_features(fmap_d, kd), loc_cfg.ratio_test)
    if len(pairs) < 2:
        return None
    src = pixel_coords([kq[i] for i, _ in pairs], img_q.shape)
    dst = pixel_coords([kd[j] for _, j in pairs], img_d.shape)
    try:
        t, _ = ransac_se2(src, dst, loc_cfg.inlier_threshold, loc_cfg.max_iters, loc_cfg.seed, loc_cfg.min_inliers)
    except (TooFewCorrespondences, NoConsensus):
        return None
    return PoseSE2(t.x * img_q.resolution, t.y * img_q.resolution, t.yaw)


def loop_closure_eval(
    images: Sequence[BevImage],
    poses: Sequence[PoseSE2],
    params: ModelParams,
    cfg: EvalConfig = EvalConfig(),
    fast_cfg: FastConfig = FastConfig(),
    loc_cfg: LocConfig = LocConfig(),
) -> LoopReport:
    """Frame ``i`` retrieves among frames ``[0, i - exclusion_window)``."""
    n, w = len(images), cfg.exclusion_window
    if n <= w + 1 or len(poses) != n:
        raise SequenceTooShort(f"{n} frames, need more than {w + 1} with matching poses")
    descs, fmaps = describe_all(images, params)
    xy = np.array([[p.x, p.y] for p in poses])
    rows, scored, et, er = [], [], [], []
    for i in range(w + 1, n):
        cand = descs[: i - w]
        d = np.linalg.norm(cand - descs[i], axis=1)
        j = int(np.argmin(d))
        geo = np.hypot(*(xy[: i - w] - xy[i]).T)
        possible = bool(np.any(geo < cfg.positive_radius))
        correct = bool(geo[j] < cfg.positive_radius)
        rows.append((i, j, float(d[j]), possible, correct))
        scored.append((float(d[j]), possible, correct))
        if correct:
            est = relative_pose(images[i], fmaps[i], images[j], fmaps[j], fast_cfg, loc_cfg)
            if est is not None:
                e_t, e_r = pose_errors(est, poses[j].inverse() @ poses[i])
                et.append(e_t)
                er.append(e_r)
    try:
        pr, err = pr_curve(scored), None
    except NoPositives as exc:
        pr, err = None, f"NoPositives: {exc}"
    return LoopReport(
        pr, len(rows), sum(r[3] for r in rows),
        float(np.mean(et)) if et else float("nan"), float(np.mean(er)) if er else float("nan"),
        rows, err,
    )


def ambiguity_profile(query_index: int, poses: Sequence[PoseSE2], descriptors: np.ndarray) -> list[tuple[float, float]]:
    """(signed geographic distance, descriptor distance) for every other frame.

    Earlier frames get a negative sign.
    """
    if not 0 <= query_index < len(poses):
        raise IndexError(f"query {query_index} outside trajectory of {len(poses)}")
    q = poses[query_index]
    out = []
    for i, p in enumerate(poses):
        if i == query_index:
            continue
        sign = -1.0 if i < query_index else 1.0
        out.append((sign * q.distance_to(p), float(np.linalg.norm(descriptors[i] - descriptors[query_index]))))
    return out


def _write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_pr_csv(path: str | os.PathLike, pr: PrResult) -> None:
    _write(path, ["threshold", "precision", "recall"], [(p.threshold, p.precision, p.recall) for p in pr.points])


def write_summary_csv(path: str | os.PathLike, metrics: dict[str, float]) -> None:
    _write(path, ["metric", "value"], list(metrics.items()))


def write_ambiguity_csv(path: str | os.PathLike, rows: Sequence[tuple[float, float]]) -> None:
    _write(path, ["geo_dist", "feat_dist"], rows)

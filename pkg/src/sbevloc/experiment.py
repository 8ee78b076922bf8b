"""Synthetic end-to-end benchmark and loss ablation.

The benchmark drives one lap around a rectangular loop through a random
world of walls and poles, then revisits part of the loop with a lateral
offset. Training sees only the BEV images of lap scans (no poses). The lap
keyframes form the database, and the revisit scans are the held-out
queries.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sbevloc.bev import BevImage, project
from sbevloc.config import Config
from sbevloc.dataset_io import (
    PoseSE2,
    SyntheticSequence,
    SyntheticWorld,
    Trajectory,
    clutter_poles,
    generate_world,
    simulate_scan,
)
from sbevloc.errors import NoValidQuery
from sbevloc.evaluation import (
    LocRecord,
    ambiguity_profile,
    describe_all,
    localization_eval,
    loop_closure_eval,
    recall_at_1,
    write_summary_csv,
)
from sbevloc.localization import build_database, localize, results_csv
from sbevloc.losses import ranking_holds
from sbevloc.model import ModelParams, describe_batch, init_params
from sbevloc.training import train
from sbevloc.triplets import generate_triplet

log = logging.getLogger(__name__)

HELDOUT_TRIPLET_SEED = 1_000_003

# Desk-scale settings: 64x64 images of a 40 m square, a small network and
# every 4th lap scan for training keep a 50-epoch run within minutes on one
# CPU core. Used as the base configuration of the benchmark and ablation.
BENCHMARK_PROFILE = (
    "bev.extent=20.0",
    "bev.voxel=0.625",
    "model.channels=4,8,8",
    "model.rotations=4",
    "model.clusters=8",
    "model.vlad_scale=0.02",
    "triplet.r=24",
    "train.lr=3e-4",
    "train.epochs=50",
    "bench.train_stride=4",
)


def benchmark_config() -> Config:
    return Config().override(BENCHMARK_PROFILE)


def loop_pose(s: float, width: float, height: float, offset: float = 0.0) -> PoseSE2:
    """Pose at arc length ``s`` on a counter-clockwise rectangle.

    ``offset`` shifts the pose to the left of the direction of travel.
    """
    per = 2.0 * (width + height)
    s = s % per
    if s < width:
        x, y, yaw = -width / 2 + s, -height / 2, 0.0
    elif s < width + height:
        x, y, yaw = width / 2, -height / 2 + (s - width), math.pi / 2
    elif s < 2 * width + height:
        x, y, yaw = width / 2 - (s - width - height), height / 2, math.pi
    else:
        x, y, yaw = -width / 2, height / 2 - (s - 2 * width - height), -math.pi / 2
    return PoseSE2(x - offset * math.sin(yaw), y + offset * math.cos(yaw), yaw)


def road_polyline(width: float, height: float) -> np.ndarray:
    w, h = width / 2, height / 2
    return np.array([(-w, -h), (w, -h), (w, h), (-w, h), (-w, -h)])


def benchmark_poses(cfg: Config) -> list[PoseSE2]:
    w, h = cfg["synth.loop_width"], cfg["synth.loop_height"]
    n_lap = cfg["synth.lap_scans"]
    step = 2.0 * (w + h) / n_lap
    lap = [loop_pose(k * step, w, h) for k in range(n_lap)]
    start, rstep, off = cfg["synth.revisit_start"], cfg["synth.revisit_step"], cfg["synth.revisit_offset"]
    rev = [loop_pose(start + k * rstep, w, h, off) for k in range(cfg["synth.revisit_scans"])]
    return lap + rev


def make_world(cfg: Config) -> SyntheticWorld:
    return generate_world(
        cfg["synth.seed"], cfg["synth.world_extent"], cfg["synth.walls"], cfg["synth.poles"],
        corridor=road_polyline(cfg["synth.loop_width"], cfg["synth.loop_height"]),
        corridor_halfwidth=cfg["synth.road_halfwidth"],
    )


def make_sequence(cfg: Config) -> SyntheticSequence:
    """World, 1 Hz-stamped trajectory and simulated scans."""
    world = make_world(cfg)
    poses = benchmark_poses(cfg)
    n_lap = cfg["synth.lap_scans"]
    seed = cfg["synth.seed"]
    scans = []
    for i, pose in enumerate(poses):
        w = world
        if i >= n_lap and cfg["synth.clutter"] > 0:
            pts, hts = clutter_poles(seed, i, pose, cfg["synth.clutter"], cfg["synth.range"] * 0.5)
            w = world.with_poles(pts, hts)
        scans.append(simulate_scan(w, pose, cfg["synth.range"], math.radians(cfg["synth.angular_res"]),
                                   cfg["synth.noise"], seed * 100_003 + i))
    traj = Trajectory(poses, tuple(range(len(poses))))
    return SyntheticSequence(world, traj, scans)


@dataclass
class BenchmarkData:
    images: list[BevImage]
    poses: list[PoseSE2]
    n_lap: int

    @property
    def lap(self) -> slice:
        return slice(0, self.n_lap)

    @property
    def queries(self) -> slice:
        return slice(self.n_lap, len(self.images))


def benchmark_data(cfg: Config) -> BenchmarkData:
    seq = make_sequence(cfg)
    bev = cfg.bev()
    return BenchmarkData([project(s, bev) for s in seq.scans], list(seq.trajectory.poses), cfg["synth.lap_scans"])


def training_images(data: BenchmarkData, cfg: Config) -> list[BevImage]:
    return data.images[data.lap][:: cfg["bench.train_stride"]]


def ranking_rate(images: list[BevImage], params: ModelParams, cfg: Config) -> tuple[int, int, float, float]:
    """Held-out triplets whose positive beats every negative, the total, and
    the mean positive and mean hardest-negative cosine similarities."""
    held, total, s_pos, s_neg = 0, 0, [], []
    tcfg, fcfg = cfg.triplet(), cfg.fast()
    for i, img in enumerate(images):
        try:
            t = generate_triplet(img, tcfg, HELDOUT_TRIPLET_SEED + i, None, fcfg)
        except NoValidQuery:
            continue
        d, _, _ = describe_batch(t.stack(), params)
        held += ranking_holds(d[0], d[1], d[2:])
        total += 1
        sims = d[1:] @ d[0]
        s_pos.append(float(sims[0]))
        s_neg.append(float(sims[1:].max()))
    nan = float("nan")
    return held, total, float(np.mean(s_pos)) if s_pos else nan, float(np.mean(s_neg)) if s_neg else nan


def ambiguity_contrast(data: BenchmarkData, descs: np.ndarray) -> tuple[float, float]:
    """Mean descriptor distance from the first query to frames within 5 m
    and to frames between 5 and 10 m."""
    prof = np.array(ambiguity_profile(data.n_lap, data.poses, descs))
    geo = np.abs(prof[:, 0])
    near, mid = prof[geo < 5.0, 1], prof[(geo >= 5.0) & (geo < 10.0), 1]
    nan = float("nan")
    return float(near.mean()) if len(near) else nan, float(mid.mean()) if len(mid) else nan


def evaluate(data: BenchmarkData, params: ModelParams, cfg: Config):
    """Retrieval and localization of the held-out queries against the lap."""
    bev, fcfg, lcfg, ecfg = cfg.bev(), cfg.fast(), cfg.loc(), cfg.eval()
    db = build_database(data.images[data.lap], data.poses[data.lap], params, bev, fcfg, lcfg)
    results, records = [], []
    for qi, (img, pose) in enumerate(zip(data.images[data.queries], data.poses[data.queries])):
        res = localize(img, db, params, bev, fcfg, lcfg)
        results.append((data.n_lap + qi, res))
        records.append(LocRecord(pose, res.database_pose, res.t_global, res.pose_ok))
    recall = recall_at_1([(r.query_pose, r.matched_pose) for r in records], ecfg)
    return recall, localization_eval(records, ecfg), results, len(db)


def run_benchmark(cfg: Config, out_dir: str | os.PathLike, workers: int = 1) -> dict[str, float]:
    """Train on the lap, evaluate trained and untrained params on the revisit.

    Writes the resolved config, checkpoints, ``loss_log.csv``,
    ``localize.csv`` and ``summary.csv`` under ``out_dir``. Every written
    file is a deterministic function of the config.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.resolved")
    t0 = time.perf_counter()
    data = benchmark_data(cfg)
    init = init_params(cfg.model(), cfg["model.seed"])
    result = train(training_images(data, cfg), cfg.model(), cfg.triplet(), cfg.loss(), cfg.train(),
                   out / "checkpoints", cfg.bev(), cfg.fast(), init=init, workers=workers)
    t_train = time.perf_counter() - t0
    recall_u, _, _, _ = evaluate(data, init, cfg)
    recall_t, loc, results, n_db = evaluate(data, result.params, cfg)
    queries = data.images[data.queries]
    held_t, total, s_pos, s_neg = ranking_rate(queries, result.params, cfg)
    held_u, _, _, _ = ranking_rate(queries, init, cfg)
    loop = loop_closure_eval(data.images, data.poses, result.params, cfg.eval(), cfg.fast(), cfg.loc())
    descs, _ = describe_all(data.images, result.params)
    near, mid = ambiguity_contrast(data, descs)
    (out / "localize.csv").write_text(results_csv(results), encoding="utf-8")
    metrics = {
        "database_keyframes": n_db,
        "queries": len(queries),
        "skipped_triplets": result.skipped,
        "recall_at_1": recall_t,
        "recall_at_1_untrained": recall_u,
        "ranking_heldout_triplets": total,
        "ranking_rate": 100.0 * held_t / max(total, 1),
        "ranking_rate_untrained": 100.0 * held_u / max(total, 1),
        "heldout_mean_s_pos": s_pos,
        "heldout_mean_s_neg": s_neg,
        "loop_r_percent": loop.pr.r_percent if loop.pr is not None else 0.0,
        "loop_ap": loop.pr.ap if loop.pr is not None else 0.0,
        "ambiguity_near_dist": near,
        "ambiguity_mid_dist": mid,
        "success_rate": loc.success_rate,
        "mean_trans_error": loc.mean_trans_error,
        "mean_rot_error": loc.mean_rot_error,
        "posed_queries": loc.n_posed,
        "final_loss": result.step_log[-1][2] if result.step_log else float("nan"),
    }
    write_summary_csv(out / "summary.csv", metrics)
    metrics["train_seconds"] = t_train
    metrics["total_seconds"] = time.perf_counter() - t0
    log.info("benchmark: %s", metrics)
    return metrics


ABLATION_LOSSES = ("softcos", "softcos_l2", "lazy_triplet")


def run_ablation(cfg: Config, out_dir: str | os.PathLike, kinds=ABLATION_LOSSES, workers: int = 1,
                 reuse: dict[str, dict] | None = None) -> list[dict]:
    """Benchmark each loss variant; writes ``ablation.csv``.

    ``reuse`` maps a loss kind to metrics from an identical earlier run so
    it is not trained twice.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for kind in kinds:
        if reuse and kind in reuse:
            m = reuse[kind]
        else:
            sub = Config(dict(cfg.values)).override([f"loss.kind={kind}"])
            m = run_benchmark(sub, out / kind, workers)
        rows.append({"loss": kind, "recall_at_1": m["recall_at_1"], "ranking_rate": m["ranking_rate"],
                     "success_rate": m["success_rate"], "mean_trans_error": m["mean_trans_error"],
                     "mean_rot_error": m["mean_rot_error"]})
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})
    return rows

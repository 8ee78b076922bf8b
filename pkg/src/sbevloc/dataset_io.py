"""Scan and pose I/O plus a deterministic synthetic LiDAR world.

KITTI conventions: a scan is a flat file of little-endian float32 records
``(x, y, z, reflectance)``; a pose file has one row-major 3x4 matrix (12
numbers) per line. Poses are reduced to the ground plane by keeping the
``(x, y)`` translation and ``yaw = atan2(R[1, 0], R[0, 0])``.

Synthetic worlds are vertical walls (2D segments with a height) and poles
(thin cylinders). All randomness comes from a counter-based Philox stream
keyed by ``(seed, entity kind, entity index, attempt)`` so regeneration is
bit-identical on any platform.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from sbevloc.errors import NonFinite, ParseError, TruncatedFile

WORLD_FORMAT = "sbevloc-world"
WORLD_VERSION = 1

_STREAM_WALL = 1
_STREAM_POLE = 2
_STREAM_SCAN = 3
_STREAM_CLUTTER = 4


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class PoseSE2:
    """Planar pose; ``yaw`` is normalized to (-pi, pi] on construction."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        vals = (self.x, self.y, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise NonFinite(f"non-finite pose {vals}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> "PoseSE2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "PoseSE2":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[0, -1], m[1, -1], math.atan2(m[1, 0], m[0, 0]))

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def compose(self, other: "PoseSE2") -> "PoseSE2":
        """``self * other``: apply ``other`` first, then ``self``."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return PoseSE2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    __matmul__ = compose

    def inverse(self) -> "PoseSE2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return PoseSE2(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 2) points from this pose's frame into the parent frame."""
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return pts @ rot.T + np.array([self.x, self.y])

    def distance_to(self, other: "PoseSE2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def yaw_difference(a: float, b: float) -> float:
    """Absolute wrapped difference between two angles, in radians."""
    return abs(wrap_angle(a - b))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in the sensor frame, meters; ``reflectance`` may be absent."""

    xyz: np.ndarray
    reflectance: np.ndarray | None = None

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(xyz).all():
            raise NonFinite("point cloud contains NaN or Inf coordinates")
        xyz.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        if self.reflectance is not None:
            refl = np.asarray(self.reflectance, dtype=np.float64).reshape(-1)
            if refl.shape[0] != xyz.shape[0]:
                raise ValueError("reflectance length does not match point count")
            refl.setflags(write=False)
            object.__setattr__(self, "reflectance", refl)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[PoseSE2, ...]
    timestamps: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        ts = tuple(self.timestamps) if len(self.timestamps) else tuple(range(len(self.poses)))
        if len(ts) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]


# --------------------------------------------------------------------- KITTI


def load_scan_kitti(path: str | os.PathLike) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is not a multiple of 16")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    if not np.isfinite(rec).all():
        raise NonFinite(f"{path}: non-finite values in scan")
    return PointCloud(rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64))


def save_scan_kitti(path: str | os.PathLike, cloud: PointCloud) -> None:
    rec = np.zeros((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.xyz
    if cloud.reflectance is not None:
        rec[:, 3] = cloud.reflectance
    Path(path).write_bytes(rec.tobytes())


def load_poses_kitti(path: str | os.PathLike) -> Trajectory:
    poses = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 12:
                raise ParseError(f"expected 12 numbers, got {len(parts)}", lineno)
            try:
                vals = np.array([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not np.isfinite(vals).all():
                raise ParseError("non-finite pose value", lineno)
            poses.append(PoseSE2.from_matrix(vals.reshape(3, 4)))
    return Trajectory(tuple(poses))


def pose_to_kitti_row(pose: PoseSE2) -> np.ndarray:
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    return np.array([[c, -s, 0.0, pose.x], [s, c, 0.0, pose.y], [0.0, 0.0, 1.0, 0.0]])


def save_poses_kitti(path: str | os.PathLike, poses: Iterable[PoseSE2]) -> None:
    lines = [" ".join(repr(float(v)) for v in pose_to_kitti_row(p).ravel()) for p in poses]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def scan_paths(directory: str | os.PathLike) -> list[Path]:
    return sorted(Path(directory).glob("*.bin"))


def load_scan_dir(directory: str | os.PathLike) -> list[PointCloud]:
    return [load_scan_kitti(p) for p in scan_paths(directory)]


# ----------------------------------------------------------------- synthetic


def _entity_rng(seed: int, stream: int, index: int, attempt: int = 0) -> np.random.Generator:
    key = [int(seed) % 2**64, stream]
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, index, attempt]))


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    """Walls ``(n, 2, 2)`` and poles ``(n, 2)`` with per-structure heights."""

    walls: np.ndarray
    wall_heights: np.ndarray
    poles: np.ndarray
    pole_heights: np.ndarray
    extent: float
    seed: int
    pole_radius: float = 0.2

    def __post_init__(self):
        for name, shape in (("walls", (-1, 2, 2)), ("poles", (-1, 2))):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(shape)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("wall_heights", "pole_heights"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        return isinstance(other, SyntheticWorld) and self.serialize() == other.serialize()

    def with_poles(self, extra: np.ndarray, heights: np.ndarray) -> "SyntheticWorld":
        return SyntheticWorld(
            self.walls, self.wall_heights,
            np.vstack([self.poles, np.asarray(extra).reshape(-1, 2)]),
            np.concatenate([self.pole_heights, np.asarray(heights).reshape(-1)]),
            self.extent, self.seed, self.pole_radius,
        )

    def serialize(self) -> str:
        out = [
            "# synthetic LiDAR world: one structure per line after the header",
            f"format = {WORLD_FORMAT}",
            f"version = {WORLD_VERSION}",
            f"seed = {self.seed}",
            f"extent = {self.extent!r}",
            f"pole_radius = {self.pole_radius!r}",
            f"walls = {len(self.walls)}",
            f"poles = {len(self.poles)}",
        ]
        for (a, b), h in zip(self.walls, self.wall_heights):
            out.append("wall " + " ".join(repr(float(v)) for v in (a[0], a[1], b[0], b[1], h)))
        for p, h in zip(self.poles, self.pole_heights):
            out.append("pole " + " ".join(repr(float(v)) for v in (p[0], p[1], h)))
        return "\n".join(out) + "\n"

    @classmethod
    def parse(cls, text: str) -> "SyntheticWorld":
        meta: dict[str, str] = {}
        walls, wh, poles, ph = [], [], [], []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                meta[k] = v
                continue
            kind, *nums = line.split()
            try:
                vals = [float(v) for v in nums]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if kind == "wall" and len(vals) == 5:
                walls.append([[vals[0], vals[1]], [vals[2], vals[3]]])
                wh.append(vals[4])
            elif kind == "pole" and len(vals) == 3:
                poles.append(vals[:2])
                ph.append(vals[2])
            else:
                raise ParseError(f"bad structure line {line!r}", lineno)
        if meta.get("format") != WORLD_FORMAT:
            raise ParseError("not a world file")
        if int(meta.get("version", -1)) != WORLD_VERSION:
            raise ParseError(f"unsupported world version {meta.get('version')}")
        if len(walls) != int(meta["walls"]) or len(poles) != int(meta["poles"]):
            raise ParseError("structure count does not match header")
        return cls(
            np.array(walls).reshape(-1, 2, 2), np.array(wh), np.array(poles).reshape(-1, 2),
            np.array(ph), float(meta["extent"]), int(meta["seed"]), float(meta["pole_radius"]),
        )

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SyntheticWorld":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points (N, 2) to segment ``ab``."""
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros(len(p)) if denom == 0 else np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def _segments_distance(a, b, c, d) -> float:
    """Minimum distance between segments ``ab`` and ``cd`` (0 if they cross)."""
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    o1, o2, o3, o4 = orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return 0.0
    return float(min(
        _point_segment_distance(np.array([c, d]), a, b).min(),
        _point_segment_distance(np.array([a, b]), c, d).min(),
    ))


def _clear_of(corridor: np.ndarray | None, halfwidth: float, a, b) -> bool:
    if corridor is None or len(corridor) < 2:
        return True
    for p, q in zip(corridor[:-1], corridor[1:]):
        if _segments_distance(np.asarray(a), np.asarray(b), p, q) < halfwidth:
            return False
    return True


def generate_world(
    seed: int,
    extent: float,
    n_walls: int,
    n_poles: int,
    corridor: Sequence[Sequence[float]] | None = None,
    corridor_halfwidth: float = 4.0,
    wall_length: tuple[float, float] = (3.0, 20.0),
    max_attempts: int = 64,
) -> SyntheticWorld:
    """Random walls and poles inside ``[-extent, extent]^2``.

    ``corridor`` is an optional polyline (a road) kept free of structures
    within ``corridor_halfwidth``; a structure that would violate it is
    redrawn from the next attempt counter, and dropped after
    ``max_attempts`` failures.
    """
    if extent <= 0:
        raise ValueError("extent must be positive")
    road = None if corridor is None else np.asarray(corridor, dtype=np.float64).reshape(-1, 2)
    walls, wh, poles, ph = [], [], [], []
    for i in range(n_walls):
        for attempt in range(max_attempts):
            rng = _entity_rng(seed, _STREAM_WALL, i, attempt)
            center = rng.uniform(-extent, extent, size=2)
            length = rng.uniform(*wall_length)
            theta = rng.uniform(0.0, math.pi)
            height = rng.uniform(0.5, 4.0)
            half = 0.5 * length * np.array([math.cos(theta), math.sin(theta)])
            a = np.clip(center - half, -extent, extent)
            b = np.clip(center + half, -extent, extent)
            if _clear_of(road, corridor_halfwidth, a, b):
                walls.append([a, b])
                wh.append(height)
                break
    for i in range(n_poles):
        for attempt in range(max_attempts):
            rng = _entity_rng(seed, _STREAM_POLE, i, attempt)
            p = rng.uniform(-extent, extent, size=2)
            height = rng.uniform(0.5, 4.0)
            if _clear_of(road, corridor_halfwidth * 0.5, p, p):
                poles.append(p)
                ph.append(height)
                break
    return SyntheticWorld(
        np.array(walls).reshape(-1, 2, 2), np.array(wh), np.array(poles).reshape(-1, 2),
        np.array(ph), float(extent), int(seed),
    )


def clutter_poles(seed: int, index: int, center: PoseSE2, count: int, radius: float,
                  min_dist: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Transient objects (parked cars, pedestrians) around a pose.

    Used to make revisits differ from the first pass; keyed by
    ``(seed, index)`` like everything else.
    """
    rng = _entity_rng(seed, _STREAM_CLUTTER, index)
    r = rng.uniform(min_dist, radius, size=count)
    a = rng.uniform(-math.pi, math.pi, size=count)
    pts = np.column_stack([center.x + r * np.cos(a), center.y + r * np.sin(a)])
    return pts, rng.uniform(0.5, 2.0, size=count)


def simulate_scan(
    world: SyntheticWorld,
    pose: PoseSE2,
    range: float,
    angular_res: float,
    noise_sigma: float,
    rng_seed: int,
    beams: int = 1,
) -> PointCloud:
    """Ray-cast a planar 360-degree scan from ``pose``.

    Rays are cast at ``k * angular_res`` in the sensor frame. The first hit
    within ``range`` gives one point whose ``z`` is uniform on the hit
    structure's height and whose range carries Gaussian noise. A pole hit
    is placed at the ray's closest approach to the pole axis. With
    ``beams > 1`` every hit yields that many points at independent heights,
    like a multi-beam sensor, so BEV density follows structure height.
    """
    if range <= 0 or angular_res <= 0 or beams < 1:
        raise ValueError("range, angular_res and beams must be positive")
    n_rays = int(math.ceil(2.0 * math.pi / angular_res - 1e-9))
    theta = np.arange(n_rays) * angular_res
    gtheta = theta + pose.yaw
    d = np.column_stack([np.cos(gtheta), np.sin(gtheta)])
    o = np.array([pose.x, pose.y])

    best_t = np.full(n_rays, np.inf)
    best_h = np.zeros(n_rays)
    if len(world.walls):
        a = world.walls[:, 0, :]
        e = world.walls[:, 1, :] - a
        ao = a - o
        denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ao[None, :, 0] * e[None, :, 1] - ao[None, :, 1] * e[None, :, 0]) / denom
            u = (ao[None, :, 0] * d[:, None, 1] - ao[None, :, 1] * d[:, None, 0]) / denom
        ok = (np.abs(denom) > 1e-15) & (t > 0) & (t <= range) & (u >= 0) & (u <= 1)
        t = np.where(ok, t, np.inf)
        j = np.argmin(t, axis=1)
        tj = t[np.arange(n_rays), j]
        hit = tj < best_t
        best_t[hit] = tj[hit]
        best_h[hit] = world.wall_heights[j[hit]]
    if len(world.poles):
        w = world.poles - o
        t = d @ w.T
        perp = np.abs(d[:, None, 0] * w[None, :, 1] - d[:, None, 1] * w[None, :, 0])
        ok = (t > 0) & (t <= range) & (perp <= world.pole_radius)
        t = np.where(ok, t, np.inf)
        j = np.argmin(t, axis=1)
        tj = t[np.arange(n_rays), j]
        hit = tj < best_t
        best_t[hit] = tj[hit]
        best_h[hit] = world.pole_heights[j[hit]]

    rng = np.random.Generator(np.random.Philox(key=[int(rng_seed) % 2**64, _STREAM_SCAN]))
    zu = rng.uniform(0.0, 1.0, size=(n_rays, beams) if beams > 1 else n_rays).reshape(n_rays, beams)
    noise = rng.standard_normal(n_rays * beams).reshape(n_rays, beams)
    hit = np.isfinite(best_t)
    r = (best_t[hit, None] + noise_sigma * noise[hit]).ravel()
    th = np.repeat(theta[hit], beams)
    z = (zu[hit] * best_h[hit, None]).ravel()
    pts = np.column_stack([r * np.cos(th), r * np.sin(th), z])
    return PointCloud(pts, np.full(len(pts), 0.5))


def distance_to_structures(world: SyntheticWorld, pts: np.ndarray) -> np.ndarray:
    """Distance from world-frame 2D points to the nearest structure surface.

    Poles count as their disc of radius ``pole_radius``.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    best = np.full(len(pts), np.inf)
    for (a, b) in world.walls:
        best = np.minimum(best, _point_segment_distance(pts, a, b))
    for p in world.poles:
        dist = np.linalg.norm(pts - p, axis=1)
        best = np.minimum(best, np.maximum(dist - world.pole_radius, 0.0))
    return best


@dataclass
class SyntheticSequence:
    """A world, a trajectory and the scans simulated along it."""

    world: SyntheticWorld
    trajectory: Trajectory
    scans: list[PointCloud] = field(default_factory=list)

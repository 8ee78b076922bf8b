"""Flat ``section.key = value`` configuration shared by every subcommand.

Lines starting with ``#`` are comments. Unknown keys are errors. The
resolved configuration (defaults + file + overrides) is written next to
every output so a run can be repeated exactly.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from sbevloc.bev import BevConfig
from sbevloc.errors import ConfigError
from sbevloc.evaluation import EvalConfig
from sbevloc.fast import FastConfig
from sbevloc.localization import LocConfig
from sbevloc.losses import LossConfig
from sbevloc.model import ModelConfig
from sbevloc.training import TrainConfig
from sbevloc.triplets import TripletConfig


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: object
    help: str


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


KEYS: tuple[Key, ...] = (
    Key("bev.extent", float, 40.0, "half-width of the square crop (m)"),
    Key("bev.voxel", float, 0.4, "voxel and pixel size (m)"),
    Key("bev.saturation", int, 8, "points per cell that map to full intensity"),
    Key("bev.zmin", float, -3.0, "lowest kept height (m)"),
    Key("bev.zmax", float, 8.0, "highest kept height (m)"),
    Key("fast.threshold", float, 0.08, "intensity difference for a bright/dark circle pixel"),
    Key("fast.arc", int, 9, "contiguous circle pixels required (9..12)"),
    Key("fast.nms_radius", int, 3, "non-maximum suppression radius (px)"),
    Key("fast.max_keypoints", int, 500, "keypoints kept after suppression"),
    Key("triplet.dth", float, 5.0, "positive/negative distance threshold (m)"),
    Key("triplet.m", int, 10, "negatives per triplet"),
    Key("triplet.r", int, 200, "patch size (px)"),
    Key("triplet.strategy", str, "fast", "candidate centers: fast, random, longitudinal"),
    Key("triplet.augment", str, "rotate", "patch augmentation: none, rotate, rotate_flip"),
    Key("model.channels", _ints, (8, 16, 16), "comma-separated conv channel counts"),
    Key("model.kernel", int, 3, "conv kernel size (odd)"),
    Key("model.rotations", int, 8, "REM rotations"),
    Key("model.clusters", int, 64, "NetVLAD clusters"),
    Key("model.vlad_scale", float, 1.0, "expected feature magnitude for NetVLAD init"),
    Key("model.seed", int, 0, "initialization seed"),
    Key("loss.kind", str, "softcos", "softcos, softcos_l2 or lazy_triplet"),
    Key("loss.tau", float, 0.1, "softplus temperature"),
    Key("loss.margin", float, 0.3, "lazy triplet margin"),
    Key("train.lr", float, 1e-4, "AdamW learning rate"),
    Key("train.epochs", int, 50, "passes over the scans"),
    Key("train.batch_size", int, 4, "triplets per update"),
    Key("train.weight_decay", float, 1e-2, "decoupled weight decay"),
    Key("train.beta1", float, 0.9, "first-moment decay"),
    Key("train.beta2", float, 0.999, "second-moment decay"),
    Key("train.eps", float, 1e-8, "AdamW epsilon"),
    Key("train.seed", int, 0, "shuffle and mining seed"),
    Key("train.clip_norm", float, 10.0, "global gradient-norm clip (0 disables)"),
    Key("train.dry_run", bool, False, "write the initial parameters without training"),
    Key("loc.inlier_threshold", float, 2.0, "RANSAC inlier distance (px)"),
    Key("loc.max_iters", int, 500, "RANSAC hypotheses"),
    Key("loc.min_inliers", int, 4, "minimum consensus"),
    Key("loc.keyframe_spacing", float, 1.0, "database keyframe spacing (m)"),
    Key("loc.ratio_test", float, 0.0, "nearest/second-nearest ratio; 0 disables"),
    Key("loc.seed", int, 0, "RANSAC seed"),
    Key("eval.positive_radius", float, 5.0, "true-match radius (m)"),
    Key("eval.loc_success_trans", float, 2.0, "success translation gate (m)"),
    Key("eval.loc_success_rot", float, 5.0, "success rotation gate (deg)"),
    Key("eval.exclusion_window", int, 100, "recent frames skipped in loop closure"),
    Key("eval.query_index", int, 0, "query frame for the ambiguity profile"),
    Key("synth.seed", int, 7, "world and scan seed"),
    Key("synth.world_extent", float, 60.0, "half-width of the world (m)"),
    Key("synth.walls", int, 60, "wall segments"),
    Key("synth.poles", int, 120, "poles"),
    Key("synth.loop_width", float, 60.0, "rectangular loop width (m)"),
    Key("synth.loop_height", float, 40.0, "rectangular loop height (m)"),
    Key("synth.road_halfwidth", float, 3.0, "structure-free half-width around the loop (m)"),
    Key("synth.lap_scans", int, 250, "scans on the first lap"),
    Key("synth.revisit_scans", int, 50, "scans on the revisit"),
    Key("synth.revisit_start", float, 37.3, "arc length where the revisit starts (m)"),
    Key("synth.revisit_step", float, 0.8, "revisit scan spacing (m)"),
    Key("synth.revisit_offset", float, 1.0, "lateral offset of the revisit (m)"),
    Key("synth.clutter", int, 0, "transient poles added around each revisit scan"),
    Key("synth.range", float, 30.0, "sensor range (m)"),
    Key("synth.angular_res", float, 0.2, "ray spacing (deg)"),
    Key("synth.noise", float, 0.02, "range noise sigma (m)"),
    Key("bench.train_stride", int, 4, "train on every n-th lap scan"),
)
_BY_NAME = {k.name: k for k in KEYS}


def _parse_value(key: Key, text: str):
    text = text.strip()
    try:
        if key.kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return key.kind(text)
    except ValueError:
        raise ConfigError(f"{key.name}: cannot parse {text!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config:
    """Resolved settings; ``cfg["train.lr"]`` or the typed section builders."""

    def __init__(self, values: dict | None = None):
        self.values = {k.name: k.default for k in KEYS}
        for name, v in (values or {}).items():
            self.set(name, v)

    def set(self, name: str, value) -> None:
        if name not in _BY_NAME:
            raise ConfigError(f"unknown config key {name!r}")
        key = _BY_NAME[name]
        self.values[name] = _parse_value(key, value) if isinstance(value, str) else value

    def __getitem__(self, name: str):
        if name not in self.values:
            raise ConfigError(f"unknown config key {name!r}")
        return self.values[name]

    def override(self, assignments) -> "Config":
        for item in assignments or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            self.set(k.strip(), v)
        return self

    def dumps(self) -> str:
        lines = ["# resolved configuration"]
        lines += [f"{k.name} = {_format_value(self.values[k.name])}" for k in KEYS]
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    # typed views
    def bev(self) -> BevConfig:
        v = self.values
        return BevConfig(v["bev.extent"], v["bev.voxel"], v["bev.saturation"], v["bev.zmin"], v["bev.zmax"])

    def fast(self) -> FastConfig:
        v = self.values
        return FastConfig(v["fast.threshold"], v["fast.arc"], v["fast.nms_radius"], v["fast.max_keypoints"])

    def triplet(self) -> TripletConfig:
        v = self.values
        return TripletConfig(v["triplet.dth"], v["triplet.m"], v["triplet.r"], v["triplet.strategy"], v["triplet.augment"])

    def model(self) -> ModelConfig:
        v = self.values
        return ModelConfig(v["model.channels"], v["model.kernel"], v["model.rotations"], v["model.clusters"],
                           vlad_scale=v["model.vlad_scale"])

    def loss(self) -> LossConfig:
        v = self.values
        return LossConfig(v["loss.kind"], v["loss.tau"], v["loss.margin"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["train.lr"], v["train.epochs"], v["train.batch_size"], v["train.weight_decay"],
                           v["train.beta1"], v["train.beta2"], v["train.eps"], v["train.seed"], v["train.clip_norm"])

    def loc(self) -> LocConfig:
        v = self.values
        return LocConfig(v["loc.inlier_threshold"], v["loc.max_iters"], v["loc.min_inliers"],
                         v["loc.keyframe_spacing"], v["loc.ratio_test"], v["loc.seed"])

    def eval(self) -> EvalConfig:
        v = self.values
        return EvalConfig(v["eval.positive_radius"], v["eval.loc_success_trans"], v["eval.loc_success_rot"],
                          v["eval.exclusion_window"])


def parse(text: str, base: Config | None = None) -> Config:
    """Apply the assignments in ``text`` on top of ``base`` (defaults if None)."""
    cfg = Config() if base is None else Config(dict(base.values))
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        try:
            cfg.set(k.strip(), v)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load(path: str | os.PathLike | None, base: Config | None = None) -> Config:
    if path is None:
        return Config() if base is None else Config(dict(base.values))
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text, base)


def key_reference() -> str:
    """Markdown table of every key, its default and meaning."""
    lines = ["# Configuration keys", "",
             "Plain text, one `section.key = value` per line, `#` starts a comment.", "",
             "| key | default | meaning |", "|---|---|---|"]
    lines += [f"| `{k.name}` | `{_format_value(k.default)}` | {k.help} |" for k in KEYS]
    return "\n".join(lines) + "\n"

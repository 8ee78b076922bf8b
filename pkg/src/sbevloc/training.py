"""Self-supervised training: scans in, parameters out, no poses anywhere.

Each epoch visits the scans in a seeded shuffled order and mines one patch
triplet per scan. Triplet gradients are computed independently and summed
in triplet order, so the result does not depend on the worker count.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from sbevloc.bev import BevConfig, BevImage, project
from sbevloc.dataset_io import PointCloud
from sbevloc.errors import NoScans, NoValidQuery, NumericalAbort, ShapeMismatch
from sbevloc.fast import FastConfig, detect
from sbevloc.losses import LossConfig, triplet_loss
from sbevloc.model import ModelConfig, ModelParams, backward, describe_batch, init_params
from sbevloc.triplets import PatchTriplet, TripletConfig, generate_triplet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
        )


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
               cfg: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    """Adam with decoupled weight decay; returns new params and state."""
    step = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** step
    bc2 = 1.0 - cfg.beta2 ** step
    new_t, new_m, new_v = {}, {}, {}
    for name, theta in params.tensors.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * theta
        new_t[name] = theta - cfg.learning_rate * update
        new_m[name], new_v[name] = m, v
    return ModelParams(params.config, new_t), OptimizerState(new_m, new_v, step)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


@dataclass
class TripletResult:
    loss: float
    grads: dict[str, np.ndarray]
    s_pos: float
    s_neg: float


def triplet_gradients(triplet: PatchTriplet, params: ModelParams, loss_cfg: LossConfig) -> TripletResult:
    patches = triplet.stack()
    desc, _, cache = describe_batch(patches, params, keep_cache=True)
    value, (gq, gp, gn) = triplet_loss(desc[0], desc[1], desc[2:], loss_cfg)
    grads = backward(np.vstack([gq[None], gp[None], gn]), cache)
    sims = desc[1:] @ desc[0]
    return TripletResult(float(value), grads, float(sims[0]), float(sims[1:].max()))


def triplet_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


@dataclass
class TrainResult:
    params: ModelParams
    step_log: list[tuple[int, int, float]] = field(default_factory=list)
    epoch_log: list[tuple[int, float, int]] = field(default_factory=list)
    skipped: int = 0


def _as_images(scans: Sequence, bev_cfg: BevConfig) -> list[BevImage]:
    return [s if isinstance(s, BevImage) else project(s, bev_cfg) for s in scans]


def train(
    scans: Sequence[PointCloud | BevImage],
    model_cfg: ModelConfig = ModelConfig(),
    triplet_cfg: TripletConfig = TripletConfig(),
    loss_cfg: LossConfig = LossConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    checkpoint_dir: str | os.PathLike | None = None,
    bev_cfg: BevConfig = BevConfig(),
    fast_cfg: FastConfig = FastConfig(),
    init: ModelParams | None = None,
    dry_run: bool = False,
    workers: int = 1,
    on_step: Callable[[int, int, float], None] | None = None,
) -> TrainResult:
    """Train the descriptor network on unlabeled scans.

    Writes ``epoch_XXX.ckpt`` after every epoch, ``final.ckpt`` at the end,
    ``loss_log.csv`` (epoch, step, loss) and ``epochs.csv`` (epoch, mean
    loss, skipped scans) when ``checkpoint_dir`` is set.
    """
    if len(scans) == 0:
        raise NoScans("training needs at least one scan")
    params = init if init is not None else init_params(model_cfg, train_cfg.seed)
    out_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(params)
    if dry_run or train_cfg.epochs == 0:
        if out_dir is not None:
            params.save(out_dir / "final.ckpt")
        return result

    images = _as_images(scans, bev_cfg)
    candidates = [detect(img, fast_cfg) for img in images] if triplet_cfg.strategy == "fast" else None
    state = OptimizerState.zeros(params)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(images))
            triplets = []
            for idx in order:
                try:
                    triplets.append(generate_triplet(
                        images[idx], triplet_cfg, triplet_seed(train_cfg.seed, epoch, int(idx)),
                        candidates[idx] if candidates is not None else None, fast_cfg,
                    ))
                except NoValidQuery:
                    result.skipped += 1
            epoch_losses = []
            for start in range(0, len(triplets), train_cfg.batch_size):
                batch = triplets[start:start + train_cfg.batch_size]
                fn = lambda t: triplet_gradients(t, params, loss_cfg)  # noqa: E731
                outs = list(pool.map(fn, batch)) if pool is not None else [fn(t) for t in batch]
                loss = sum(o.loss for o in outs) / len(outs)
                if not math.isfinite(loss):
                    raise NumericalAbort(f"non-finite loss {loss} at epoch {epoch}, step {step}")
                grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
                for o in outs:
                    for k in grads:
                        grads[k] += o.grads[k]
                grads = {k: g / len(outs) for k, g in grads.items()}
                grads = clip_gradients(grads, train_cfg.clip_norm)
                params, state = adamw_step(params, grads, state, train_cfg)
                result.step_log.append((epoch, step, loss))
                epoch_losses.append(loss)
                if on_step is not None:
                    on_step(epoch, step, loss)
                step += 1
            mean = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            result.epoch_log.append((epoch, mean, len(images) - len(triplets)))
            log.info("epoch %d: mean loss %.6f over %d steps", epoch, mean, len(epoch_losses))
            if out_dir is not None:
                params.save(out_dir / f"epoch_{epoch:03d}.ckpt")
    finally:
        if pool is not None:
            pool.shutdown()
    result.params = params
    if out_dir is not None:
        params.save(out_dir / "final.ckpt")
        write_loss_log(out_dir / "loss_log.csv", result.step_log)
        write_epoch_log(out_dir / "epochs.csv", result.epoch_log)
    return result


def write_loss_log(path: str | os.PathLike, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss"])
        for epoch, step, loss in rows:
            w.writerow([epoch, step, repr(float(loss))])


def write_epoch_log(path: str | os.PathLike, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "skipped"])
        for epoch, mean, skipped in rows:
            w.writerow([epoch, repr(float(mean)), skipped])

"""Triplet losses over global descriptors, with exact descriptor gradients.

All three losses take a query, a positive and ``m`` negatives and return
``(value, (g_query, g_positive, g_negatives))``. Only the hardest negative
carries gradient; ties go to the lowest index. A hinge exactly at its kink
has zero gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sbevloc.errors import DegenerateDescriptor, EmptyNegatives

KINDS = ("softcos", "softcos_l2", "lazy_triplet")
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    kind: str = "softcos"
    tau: float = 0.1
    margin: float = 0.3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.tau <= 0 or self.margin < 0:
            raise ValueError("tau must be > 0 and margin >= 0")


def softplus(x, tau: float = 0.1):
    """``tau * log(1 + exp(x / tau))`` without overflow."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0, x + tau * np.log1p(np.exp(-np.abs(x) / tau)),
                   tau * np.log1p(np.exp(-np.abs(x) / tau)))
    return float(out) if out.ndim == 0 else out


def softplus_grad(x, tau: float = 0.1):
    """Derivative of :func:`softplus`: the logistic function of ``x / tau``."""
    x = np.asarray(x, dtype=np.float64) / tau
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return float(out) if out.ndim == 0 else out


def _prepare(vq, vp, vns):
    vq = np.asarray(vq, dtype=np.float64).ravel()
    vp = np.asarray(vp, dtype=np.float64).ravel()
    vns = np.asarray(vns, dtype=np.float64)
    if vns.size == 0:
        raise EmptyNegatives("at least one negative is required")
    vns = vns.reshape(-1, vq.shape[0])
    return vq, vp, vns


def _cosine(a: np.ndarray, b: np.ndarray):
    """Cosine similarity and its gradients with respect to ``a`` and ``b``."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= _NORM_EPS or nb <= _NORM_EPS:
        raise DegenerateDescriptor("cosine similarity of a zero vector")
    s = float(a @ b) / (na * nb)
    ga = b / (na * nb) - s * a / (na * na)
    gb = a / (na * nb) - s * b / (nb * nb)
    return s, ga, gb


def _euclid(a: np.ndarray, b: np.ndarray):
    d = a - b
    n = float(np.linalg.norm(d))
    g = d / n if n > 0 else np.zeros_like(d)
    return n, g, -g


def softcos_loss(vq, vp, vns, tau: float = 0.1):
    vq, vp, vns = _prepare(vq, vp, vns)
    s_pos, gq_pos, gp = _cosine(vq, vp)
    sims = [_cosine(vq, vn) for vn in vns]
    j = int(np.argmax([s for s, _, _ in sims]))
    s_neg, gq_neg, gn = sims[j]
    x = s_neg - s_pos
    value = softplus(x, tau)
    dval = softplus_grad(x, tau)
    g_neg = np.zeros_like(vns)
    g_neg[j] = dval * gn
    return value, (dval * (gq_neg - gq_pos), -dval * gp, g_neg)


def softcos_l2_loss(vq, vp, vns, tau: float = 0.1):
    vq, vp, vns = _prepare(vq, vp, vns)
    d_pos, gq_pos, gp = _euclid(vq, vp)
    dists = [_euclid(vq, vn) for vn in vns]
    j = int(np.argmin([d for d, _, _ in dists]))
    d_neg, gq_neg, gn = dists[j]
    x = d_pos - d_neg
    value = softplus(x, tau)
    dval = softplus_grad(x, tau)
    g_neg = np.zeros_like(vns)
    g_neg[j] = -dval * gn
    return value, (dval * (gq_pos - gq_neg), dval * gp, g_neg)


def lazy_triplet_loss(vq, vp, vns, margin: float = 0.3):
    vq, vp, vns = _prepare(vq, vp, vns)
    d_pos, gq_pos, gp = _euclid(vq, vp)
    dists = [_euclid(vq, vn) for vn in vns]
    j = int(np.argmin([d for d, _, _ in dists]))
    d_neg, gq_neg, gn = dists[j]
    pre = d_pos - d_neg + margin
    g_neg = np.zeros_like(vns)
    if pre <= 0:
        return 0.0, (np.zeros_like(vq), np.zeros_like(vp), g_neg)
    g_neg[j] = -gn
    return float(pre), (gq_pos - gq_neg, gp, g_neg)


def triplet_loss(vq, vp, vns, cfg: LossConfig = LossConfig()):
    if cfg.kind == "softcos":
        return softcos_loss(vq, vp, vns, cfg.tau)
    if cfg.kind == "softcos_l2":
        return softcos_l2_loss(vq, vp, vns, cfg.tau)
    return lazy_triplet_loss(vq, vp, vns, cfg.margin)


def ranking_holds(vq, vp, vns) -> bool:
    """True when the positive is more similar than every negative."""
    vq, vp, vns = _prepare(vq, vp, vns)
    s_pos = _cosine(vq, vp)[0]
    return all(s_pos > _cosine(vq, vn)[0] for vn in vns)

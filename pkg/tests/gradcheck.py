"""Central finite-difference check of the full descriptor pipeline."""
import numpy as np

from sbevloc.losses import LossConfig, triplet_loss
from sbevloc.model import ModelParams, backward, describe_batch

STEP = 1e-5
DENOM_FLOOR = 1e-6


def _forward(images, params, loss_cfg):
    desc, _, cache = describe_batch(images, params, keep_cache=True)
    value, grads = triplet_loss(desc[0], desc[1], desc[2:], loss_cfg)
    # Everything that selects a branch: leaky masks, REM winners, hardest negative.
    sims = desc[2:] @ desc[0]
    branch = [m > 0 for m in cache.layer_pre[:-1]] + [cache.rem_argmax, np.argmax(sims)]
    return value, grads, cache, branch


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check(images, params: ModelParams, n_params=100, seed=0, loss_cfg=LossConfig()):
    """Relative errors of randomly chosen parameter gradients.

    Perturbations that move any branch decision (a kink of the piecewise
    pipeline) are skipped and replaced by another draw, since finite
    differences are meaningless across a kink.
    """
    _, (gq, gp, gn), cache, base = _forward(images, params, loss_cfg)
    analytic = backward(np.vstack([gq[None], gp[None], gn]), cache)
    rng = np.random.default_rng(seed)
    names = list(params.tensors)
    sizes = np.array([params[n].size for n in names], dtype=float)
    errors, skipped = [], 0
    while len(errors) < n_params:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = np.unravel_index(rng.integers(params[name].size), params[name].shape)
        vals = []
        for sign in (1.0, -1.0):
            p = params.copy()
            p.tensors[name][idx] += sign * STEP
            v, _, _, branch = _forward(images, p, loss_cfg)
            vals.append((v, branch))
        if not (_same(vals[0][1], base) and _same(vals[1][1], base)):
            skipped += 1
            continue
        numeric = (vals[0][0] - vals[1][0]) / (2 * STEP)
        a = analytic[name][idx]
        errors.append(abs(a - numeric) / max(abs(a), abs(numeric), DENOM_FLOOR))
    return np.array(errors), skipped

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sbevloc.errors import DegenerateDescriptor, EmptyNegatives
from sbevloc.losses import (
    LossConfig,
    lazy_triplet_loss,
    ranking_holds,
    softcos_l2_loss,
    softcos_loss,
    softplus,
    softplus_grad,
    triplet_loss,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def fd_check(fn, vq, vp, vns, h=1e-6):
    _, (gq, gp, gn) = fn(vq, vp, vns)
    for arr, g in ((vq, gq), (vp, gp), (vns, gn)):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn(vq, vp, vns)[0]
            flat[i] = old - h
            down = fn(vq, vp, vns)[0]
            flat[i] = old
            num = (up - down) / (2 * h)
            assert abs(num - gflat[i]) <= 1e-6 * max(abs(num), abs(gflat[i]), 1e-3)


def test_softplus_values():
    assert softplus(0.0, 0.1) == pytest.approx(0.1 * math.log(2), abs=1e-15)
    assert softplus(50.0, 0.1) == pytest.approx(50.0, abs=1e-12)
    assert softplus(-50.0, 0.1) >= 0.0
    x = np.linspace(-5, 5, 10_001)
    assert np.max(np.abs(softplus(x, 1e-4) - np.maximum(x, 0))) < 1e-3


@given(st.floats(-3, 3), st.floats(0.01, 1.0))
def test_softplus_grad_is_derivative(x, tau):
    h = 1e-6
    num = (softplus(x + h, tau) - softplus(x - h, tau)) / (2 * h)
    assert softplus_grad(x, tau) == pytest.approx(num, abs=1e-5)


def test_softcos_identity_case():
    vq = unit([1, 0, 0, 0])
    vns = np.array([[0, 1.0, 0, 0], [0, 0, 1.0, 0]])
    value, (gq, gp, gn) = softcos_loss(vq, vq.copy(), vns, 0.1)
    assert value == pytest.approx(0.1 * math.log1p(math.exp(-10)), abs=1e-15)
    assert value == pytest.approx(4.5399e-6, abs=1e-9)


def test_softcos_negative_equals_positive(rng):
    vq, vp = unit(rng.normal(size=8)), unit(rng.normal(size=8))
    value, _ = softcos_loss(vq, vp, vp[None], 0.1)
    assert value == pytest.approx(0.1 * math.log(2), abs=1e-12)


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_softcos_scale_invariant(a, b, c):
    rng = np.random.default_rng(0)
    vq, vp, vns = rng.normal(size=16), rng.normal(size=16), rng.normal(size=(3, 16))
    base = softcos_loss(vq, vp, vns)[0]
    assert abs(softcos_loss(a * vq, b * vp, c * vns)[0] - base) < 1e-12


def test_l2_examples():
    v = unit([1, 0, 0])
    assert softcos_l2_loss(v, v, -v[None], 0.1)[0] == pytest.approx(softplus(-2.0, 0.1), rel=1e-12)
    assert softplus(-2.0, 0.1) == pytest.approx(2.06e-10, rel=1e-2)
    w, u = unit([0, 1, 0]), unit([0, 0, 1])
    assert softcos_l2_loss(v, w, u[None], 0.1)[0] == pytest.approx(0.1 * math.log(2), abs=1e-12)


def test_lazy_examples():
    v, w = unit([1, 0, 0]), unit([0, 1, 0])
    # d+ = 0 and d- = 1.
    value, grads = lazy_triplet_loss(v, v, (v + np.array([0, 0, 1.0]))[None], 0.3)
    assert value == 0.0 and all(not g.any() for g in grads)
    assert lazy_triplet_loss(v, w, w[None] * 1.0, 0.3)[0] == pytest.approx(0.3)


@pytest.mark.parametrize("fn", [softcos_loss, softcos_l2_loss])
def test_gradients_finite_difference(rng, fn):
    vq, vp = unit(rng.normal(size=32)), unit(rng.normal(size=32))
    vns = np.array([unit(rng.normal(size=32)) for _ in range(10)])
    fd_check(fn, vq, vp, vns)


def test_lazy_gradients_away_from_kink(rng):
    for _ in range(20):
        vq, vp = unit(rng.normal(size=32)), unit(rng.normal(size=32))
        vns = np.array([unit(rng.normal(size=32)) for _ in range(10)])
        d = np.linalg.norm(vns - vq, axis=1)
        pre = np.linalg.norm(vq - vp) - d.min() + 0.3
        if abs(pre) > 1e-3:
            fd_check(lambda a, b, c: lazy_triplet_loss(a, b, c, 0.3), vq, vp, vns)


def test_only_hardest_negative_gets_gradient(rng):
    vq = unit(rng.normal(size=8))
    vns = np.array([unit(rng.normal(size=8)) for _ in range(5)])
    _, (_, _, gn) = softcos_loss(vq, unit(rng.normal(size=8)), vns)
    hardest = int(np.argmax(vns @ vq))
    assert np.count_nonzero(np.abs(gn).sum(axis=1)) == 1 and gn[hardest].any()


def test_errors():
    v = unit([1, 0])
    with pytest.raises(EmptyNegatives):
        softcos_loss(v, v, np.zeros((0, 2)))
    with pytest.raises(DegenerateDescriptor):
        softcos_loss(np.zeros(2), v, v[None])
    with pytest.raises(ValueError):
        LossConfig(kind="contrastive")


def test_dispatch_and_ranking(rng):
    vq, vp = unit([1, 0.1, 0]), unit([1, 0, 0])
    vns = np.array([unit([0, 1, 0]), unit([0, 0, 1])])
    for kind in ("softcos", "softcos_l2", "lazy_triplet"):
        assert triplet_loss(vq, vp, vns, LossConfig(kind))[0] >= 0.0
    assert ranking_holds(vq, vp, vns)
    assert not ranking_holds(vq, vns[0], np.array([vp]))

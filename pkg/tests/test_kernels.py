import numpy as np
import pytest

from oracles import conv_naive
from sbevloc import _pure, kernels

BACKENDS = kernels.available_backends()


@pytest.fixture(params=BACKENDS)
def backend(request):
    before = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(before)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_forward_matches_naive(backend, rng, k):
    x = rng.normal(size=(2, 9, 7, 3))
    w = rng.normal(size=(k, k, 3, 4))
    b = rng.normal(size=4)
    np.testing.assert_allclose(kernels.conv2d_forward(x, w, b), conv_naive(x, w, b), atol=1e-12)


def test_conv_backward_is_adjoint(backend, rng):
    # <conv(x), g> is linear in x and w, so the gradients follow from the
    # forward pass alone.
    x = rng.normal(size=(2, 8, 8, 3))
    w = rng.normal(size=(3, 3, 3, 5))
    g = rng.normal(size=(2, 8, 8, 5))
    g[rng.uniform(size=g.shape) < 0.5] = 0.0
    zero_b = np.zeros(5)
    gw, gb, gx = kernels.conv2d_backward(g, x, w)
    dx, dw = rng.normal(size=x.shape), rng.normal(size=w.shape)
    assert np.sum(gx * dx) == pytest.approx(np.sum(kernels.conv2d_forward(dx, w, zero_b) * g), rel=1e-10)
    assert np.sum(gw * dw) == pytest.approx(np.sum(kernels.conv2d_forward(x, dw, zero_b) * g), rel=1e-10)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 1, 2)), atol=1e-12)
    _, _, none = kernels.conv2d_backward(g, x, w, need_input_grad=False)
    assert none is None


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
def test_backends_agree(rng):
    x = rng.normal(size=(3, 12, 12, 2))
    x[x < 0] = 0.0
    w = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    g = rng.normal(size=(3, 12, 12, 4))
    img = rng.uniform(size=(40, 40))
    before = kernels.BACKEND
    outs = {}
    for name in BACKENDS:
        kernels.use_backend(name)
        scores = kernels.fast_scores(img, 0.1, 9)
        r, c = np.nonzero(scores)
        order = np.lexsort((c, r, -scores[r, c]))
        keep = kernels.nms_greedy(r[order], c[order], scores.shape, 3, 50)
        outs[name] = (kernels.conv2d_forward(x, w, b), *kernels.conv2d_backward(g, x, w), scores, keep)
    kernels.use_backend(before)
    a, b_ = outs["python"], outs["cython"]
    for u, v in zip(a[:4], b_[:4]):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(a[4], b_[4])
    np.testing.assert_array_equal(a[5], b_[5])


def test_nms_greedy_order(backend):
    rows = np.array([5, 6, 20, 5])
    cols = np.array([5, 6, 20, 9])
    keep = kernels.nms_greedy(rows, cols, (30, 30), 3, 10)
    np.testing.assert_array_equal(keep, [0, 2, 3])
    np.testing.assert_array_equal(kernels.nms_greedy(rows, cols, (30, 30), 3, 2), [0, 2])


def test_circle_is_radius_three():
    d = np.hypot(*np.array(_pure.CIRCLE).T)
    assert len(set(_pure.CIRCLE)) == 16
    assert np.all((d > 2.5) & (d < 3.5))

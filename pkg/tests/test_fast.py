import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import fast_detect_naive, fast_score_naive
from sbevloc.bev import BevImage
from sbevloc.errors import ImageTooSmall
from sbevloc.fast import FastConfig, corner_scores, detect, detect_fast, keypoint_array


def blocky(rng, size=64):
    """Random piecewise-constant image: lots of corners and flat regions."""
    coarse = rng.uniform(size=(size // 4, size // 4)) * (rng.uniform(size=(size // 4, size // 4)) < 0.4)
    return np.kron(coarse, np.ones((4, 4)))


def test_uniform_image_has_no_corners():
    assert detect_fast(BevImage(np.full((32, 32), 0.5), 0.4)) == []


def test_single_bright_pixel():
    px = np.zeros((21, 21))
    px[10, 10] = 1.0
    kps = detect_fast(px, threshold=0.1, arc=9)
    assert [(k.row, k.col) for k in kps] == [(10, 10)]
    assert kps[0].score == pytest.approx(16 * 0.9)


def test_too_small():
    with pytest.raises(ImageTooSmall):
        detect_fast(np.zeros((6, 30)))


def test_bad_arc():
    with pytest.raises(ValueError):
        corner_scores(np.zeros((10, 10)), 0.1, 8)


def test_scores_match_naive(rng):
    img = blocky(rng, 32)
    scores = corner_scores(img, 0.08, 9)
    for r in range(3, 29):
        for c in range(3, 29):
            assert scores[r, c] == pytest.approx(fast_score_naive(img, r, c, 0.08, 9), abs=1e-12)
    assert not scores[:3].any() and not scores[:, -3:].any()


@pytest.mark.parametrize("arc", [9, 12])
def test_detect_matches_naive(rng, arc):
    img = blocky(rng, 32) + 0.01 * rng.uniform(size=(32, 32))
    got = [(k.row, k.col) for k in detect_fast(img, 0.05, arc, 3, 500)]
    want = [(r, c) for _, r, c in fast_detect_naive(img, 0.05, arc, 3, 500)]
    assert got == want


def test_nms_radius_and_cap(rng):
    img = blocky(rng, 64)
    kps = detect(img, FastConfig(threshold=0.05, nms_radius=4, max_keypoints=7))
    assert len(kps) <= 7
    pts = keypoint_array(kps)
    for i in range(len(pts)):
        for j in range(i):
            assert np.abs(pts[i] - pts[j]).max() > 4
    scores = [k.score for k in kps]
    assert scores == sorted(scores, reverse=True)


@given(st.integers(0, 10_000))
def test_translation_equivariance(seed):
    img = blocky(np.random.default_rng(seed), 32)

    def corners(offset):
        canvas = np.zeros((50, 50))
        canvas[offset:offset + 32, offset:offset + 32] = img
        return {(k.row - offset, k.col - offset) for k in detect_fast(canvas, 0.05, 9, 0, 10_000)}

    assert corners(6) == corners(9)

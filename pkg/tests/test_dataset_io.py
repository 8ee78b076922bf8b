import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import se2_matrix
from sbevloc.dataset_io import (
    PointCloud,
    PoseSE2,
    SyntheticWorld,
    distance_to_structures,
    generate_world,
    load_poses_kitti,
    load_scan_kitti,
    pose_to_kitti_row,
    save_poses_kitti,
    save_scan_kitti,
    simulate_scan,
    wrap_angle,
)
from sbevloc.errors import NonFinite, ParseError, TruncatedFile

coord = st.floats(-100, 100, allow_nan=False)
angle = st.floats(-20, 20, allow_nan=False)


def test_scan_two_points(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(struct.pack("<8f", 1, 2, 3, 0.5, 4, 5, 6, 0.1))
    cloud = load_scan_kitti(p)
    assert len(cloud) == 2
    np.testing.assert_array_equal(cloud.xyz, [[1, 2, 3], [4, 5, 6]])
    np.testing.assert_allclose(cloud.reflectance, [0.5, 0.1], rtol=1e-7)


def test_scan_empty_and_truncated(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    assert len(load_scan_kitti(p)) == 0
    p.write_bytes(b"\0" * 17)
    with pytest.raises(TruncatedFile):
        load_scan_kitti(p)


def test_scan_nan_rejected(tmp_path):
    p = tmp_path / "n.bin"
    p.write_bytes(struct.pack("<4f", 1, float("nan"), 0, 0))
    with pytest.raises(NonFinite):
        load_scan_kitti(p)


def test_scan_roundtrip_is_float32(tmp_path, rng):
    xyz = rng.normal(size=(50, 3))
    cloud = PointCloud(xyz, rng.uniform(size=50))
    save_scan_kitti(tmp_path / "s.bin", cloud)
    back = load_scan_kitti(tmp_path / "s.bin")
    np.testing.assert_array_equal(back.xyz, xyz.astype(np.float32).astype(np.float64))
    assert (tmp_path / "s.bin").stat().st_size == 50 * 16


def test_pose_identity_line(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("1 0 0 0  0 1 0 0  0 0 1 0\n")
    assert load_poses_kitti(p).poses == (PoseSE2(0, 0, 0),)


def test_pose_yaw_quarter_turn(tmp_path):
    # Rz(pi/2) with translation (2, 3, 9); z is dropped.
    p = tmp_path / "poses.txt"
    p.write_text("0 -1 0 2  1 0 0 3  0 0 1 9\n")
    pose = load_poses_kitti(p).poses[0]
    assert (pose.x, pose.y) == (2.0, 3.0)
    assert pose.yaw == pytest.approx(math.pi / 2, abs=1e-15)


def test_pose_bad_line_reports_line(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(ParseError) as exc:
        load_poses_kitti(p)
    assert exc.value.line == 2


def test_pose_file_roundtrip(tmp_path):
    poses = [PoseSE2(1.5, -2.0, 0.3), PoseSE2(0, 0, math.pi), PoseSE2(-7, 3, -2.5)]
    save_poses_kitti(tmp_path / "p.txt", poses)
    back = load_poses_kitti(tmp_path / "p.txt").poses
    for a, b in zip(poses, back):
        assert b.x == a.x and b.y == a.y
        assert b.yaw == pytest.approx(a.yaw, abs=1e-12)
    assert pose_to_kitti_row(poses[0]).shape == (3, 4)


@given(angle)
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)
    assert math.sin(w) == pytest.approx(math.sin(a), abs=1e-9)


@given(coord, coord, angle, coord, coord, angle)
def test_compose_is_matrix_product(x1, y1, t1, x2, y2, t2):
    a, b = PoseSE2(x1, y1, t1), PoseSE2(x2, y2, t2)
    expect = se2_matrix(x1, y1, t1) @ se2_matrix(x2, y2, t2)
    np.testing.assert_allclose((a @ b).matrix(), expect, atol=1e-9)


@given(coord, coord, angle)
def test_inverse(x, y, t):
    p = PoseSE2(x, y, t)
    np.testing.assert_allclose((p @ p.inverse()).matrix(), np.eye(3), atol=1e-9)


@given(coord, coord, angle)
def test_transform_matches_matrix(x, y, t):
    p = PoseSE2(x, y, t)
    pts = np.array([[1.0, 2.0], [-3.0, 0.5]])
    homog = np.column_stack([pts, np.ones(2)]) @ se2_matrix(x, y, t).T
    np.testing.assert_allclose(p.transform(pts), homog[:, :2], atol=1e-9)


def test_pose_rejects_nan():
    with pytest.raises(NonFinite):
        PoseSE2(float("nan"), 0, 0)


def test_empty_world():
    w = generate_world(7, 100.0, 0, 0)
    assert w.walls.shape == (0, 2, 2) and w.poles.shape == (0, 2)
    assert len(simulate_scan(w, PoseSE2(0, 0, 0), 30.0, 0.01, 0.0, 0)) == 0


def test_world_determinism_and_seed():
    a, b = generate_world(7, 50.0, 20, 30), generate_world(7, 50.0, 20, 30)
    assert a == b and a.serialize() == b.serialize()
    c = generate_world(8, 50.0, 20, 30)
    assert not np.array_equal(a.walls, c.walls)


def test_world_prefix_stable():
    # Entity streams are independent, so adding structures keeps earlier ones.
    a, b = generate_world(3, 50.0, 5, 5), generate_world(3, 50.0, 10, 8)
    np.testing.assert_array_equal(a.walls, b.walls[:5])
    np.testing.assert_array_equal(a.poles, b.poles[:5])


def test_world_file_roundtrip(tmp_path):
    w = generate_world(5, 40.0, 10, 10)
    w.save(tmp_path / "w.txt")
    assert SyntheticWorld.load(tmp_path / "w.txt") == w


def test_world_parse_errors():
    with pytest.raises(ParseError):
        SyntheticWorld.parse("format = nope\nversion = 1\n")
    text = generate_world(5, 40.0, 2, 2).serialize().replace("walls = 2", "walls = 3")
    with pytest.raises(ParseError):
        SyntheticWorld.parse(text)


def test_corridor_kept_clear():
    road = np.array([[-30.0, 0.0], [30.0, 0.0]])
    w = generate_world(11, 40.0, 40, 60, corridor=road, corridor_halfwidth=3.0)
    assert len(w.walls) > 0
    samples = np.column_stack([np.linspace(-30, 30, 601), np.zeros(601)])
    assert distance_to_structures(w, samples).min() >= 1.5 - 1e-9


def test_single_pole_ahead():
    w = SyntheticWorld(np.zeros((0, 2, 2)), [], [[5.0, 0.0]], [2.0], 10.0, 0)
    cloud = simulate_scan(w, PoseSE2(0, 0, 0), 30.0, math.radians(0.1), 0.0, 0)
    d = np.hypot(cloud.xyz[:, 0] - 5.0, cloud.xyz[:, 1])
    assert d.min() < 1e-9
    assert np.all((cloud.xyz[:, 2] >= 0) & (cloud.xyz[:, 2] <= 2.0))


def test_scan_points_on_structures(world):
    pose = PoseSE2(1.0, -2.0, 0.7)
    cloud = simulate_scan(world, pose, 20.0, math.radians(0.5), 0.0, 4)
    assert len(cloud) > 100
    gpts = pose.transform(cloud.xyz[:, :2])
    assert distance_to_structures(world, gpts).max() < 1e-6
    assert np.all(np.hypot(cloud.xyz[:, 0], cloud.xyz[:, 1]) <= 20.0 + 1e-9)


def test_scan_determinism_and_beams(world):
    pose = PoseSE2(0, 0, 0)
    a = simulate_scan(world, pose, 20.0, 0.01, 0.02, 9)
    b = simulate_scan(world, pose, 20.0, 0.01, 0.02, 9)
    np.testing.assert_array_equal(a.xyz, b.xyz)
    c = simulate_scan(world, pose, 20.0, 0.01, 0.02, 9, beams=4)
    assert len(c) == 4 * len(a)
    with pytest.raises(ValueError):
        simulate_scan(world, pose, 20.0, 0.01, 0.02, 9, beams=0)

import numpy as np
import pytest

from ctlio.bspline import KnotState, SplineTrajectory
from ctlio.lie import Rotation, exp_so3
from ctlio.mapping import (
    AssociationConfig,
    KeyframeConfig,
    LocalMap,
    Scan,
    associate,
    deskew,
    fit_plane,
    load_scan,
    maybe_insert_keyframe,
    save_scan,
    voxel_downsample,
)


def make_map(points, voxel=0.0):
    m = LocalMap(voxel_size=voxel)
    m.insert(np.asarray(points, dtype=float))
    return m


def test_knn_matches_brute_force():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-5, 5, size=(2000, 3))
    m = make_map(pts)
    for _ in range(50):
        q = rng.uniform(-5, 5, size=3)
        d, idx = m.knn(q, 5)
        brute = np.argsort(np.linalg.norm(pts - q, axis=1))[:5]
        np.testing.assert_array_equal(idx, brute)
        assert np.all(np.diff(d) >= 0)


def test_voxel_downsample_keeps_first_and_thins():
    pts = np.array([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02], [1.5, 0.0, 0.0]])
    kept = voxel_downsample(pts, 0.2)
    assert len(kept) == 2
    np.testing.assert_allclose(kept[0], pts[0])


def test_deskew_static_is_rigid_transform():
    st = KnotState(exp_so3([0.1, 0.2, -0.3]), np.array([1.0, -2.0, 0.5]),
                   np.zeros(3), np.zeros(3))
    traj = SplineTrajectory.constant(4, 0.05, 0.0, 10, st)
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(100, 3))
    scan = Scan(t_start=0.05, period=0.1, points=pts,
                offsets=np.linspace(0.0, 0.1, 100, endpoint=False))
    world = deskew(scan, traj)
    expect = st.R.rotate(pts) + st.p
    np.testing.assert_allclose(world, expect, atol=1e-12)


def test_deskew_constant_velocity_offsets():
    v0 = np.array([2.0, 0.0, 0.0])
    probe = SplineTrajectory.constant(4, 0.05, 0.0, 12)
    knots = [KnotState(Rotation.identity(), v0 * probe.control_time(j),
                       np.zeros(3), np.zeros(3)) for j in range(12)]
    traj = SplineTrajectory(4, 0.05, 0.0, knots)
    T = 0.1
    scan = Scan(t_start=0.1, period=T,
                points=np.zeros((2, 3)), offsets=np.array([0.0, T]))
    world = deskew(scan, traj)
    np.testing.assert_allclose(world[1] - world[0], v0 * T, atol=1e-9)


def test_deskew_time_binning_close_to_exact():
    rng = np.random.default_rng(2)
    knots = []
    r, p = Rotation.identity(), np.zeros(3)
    for _ in range(12):
        r = r * exp_so3(rng.normal(size=3) * 0.05)
        p = p + rng.normal(size=3) * 0.07
        knots.append(KnotState(Rotation(r.q), p.copy(), np.zeros(3), np.zeros(3)))
    traj = SplineTrajectory(4, 0.05, 0.0, knots)
    pts = rng.normal(size=(200, 3)) * 3.0
    scan = Scan(t_start=0.1, period=0.1, points=pts,
                offsets=rng.uniform(0.0, 0.1, size=200))
    exact = deskew(scan, traj)
    binned = deskew(scan, traj, time_bin=0.001)
    # bound ~ (|v| + |w| * range) * bin/2 with |v|~3 m/s, |w|~2 rad/s,
    # range ~3 m: about 6 mm worst case here
    assert np.max(np.linalg.norm(exact - binned, axis=1)) < 1e-2


def test_fit_plane_exact_plane():
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.normal(size=20), rng.normal(size=20),
                           np.zeros(20)])
    mu, n, planarity = fit_plane(pts)
    assert abs(abs(n[2]) - 1.0) < 1e-12
    assert abs(mu[2]) < 1e-12
    assert planarity > 1.0 - 1e-9


def test_associate_plane_neighbors():
    rng = np.random.default_rng(4)
    plane_pts = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50),
                                 np.zeros(50)])
    m = make_map(plane_pts)
    corr = associate(np.array([0.0, 0.0, 0.05]), np.zeros(3), 0.0, m,
                     sensor_origin=np.array([0.0, 0.0, 2.0]))
    assert corr is not None
    np.testing.assert_allclose(np.abs(corr.n), [0.0, 0.0, 1.0], atol=1e-9)
    assert corr.n[2] > 0  # oriented toward the sensor
    assert abs(corr.mu[2]) < 1e-9


def test_associate_rejects_isotropic_blob():
    rng = np.random.default_rng(5)
    blob = rng.normal(size=(100, 3))
    m = make_map(blob)
    corr = associate(np.zeros(3), np.zeros(3), 0.0, m,
                     sensor_origin=np.array([0.0, 0.0, 2.0]))
    assert corr is None


def test_associate_rejects_sparse_neighborhood():
    pts = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0],
                    [10.0, 10.0, 0.0], [5.0, 5.0, 10.0]])
    m = make_map(pts)
    corr = associate(np.zeros(3), np.zeros(3), 0.0, m,
                     sensor_origin=np.array([0.0, 0.0, 2.0]),
                     cfg=AssociationConfig(knn=5, max_neighbor_radius=1.0))
    assert corr is None


def test_associate_requires_minimum_map():
    m = LocalMap()
    m.insert(np.zeros((3, 3)))
    assert associate(np.zeros(3), np.zeros(3), 0.0, m,
                     sensor_origin=np.zeros(3)) is None


def test_association_deterministic():
    rng = np.random.default_rng(6)
    plane_pts = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50),
                                 np.zeros(50)])
    m = make_map(plane_pts)
    q = np.array([0.1, -0.2, 0.02])
    a = associate(q, np.zeros(3), 0.0, m, sensor_origin=np.array([0, 0, 2.0]))
    b = associate(q, np.zeros(3), 0.0, m, sensor_origin=np.array([0, 0, 2.0]))
    np.testing.assert_array_equal(a.n, b.n)
    np.testing.assert_array_equal(a.mu, b.mu)


def test_keyframe_insertion_rules():
    rng = np.random.default_rng(7)
    m = LocalMap(voxel_size=0.1)
    pts = rng.normal(size=(500, 3))
    # first scan always inserted
    assert maybe_insert_keyframe(m, pts, 0.0, Rotation.identity(), np.zeros(3))
    size0 = len(m)
    assert size0 > 0
    # small motion: skipped
    assert not maybe_insert_keyframe(m, pts, 0.1, exp_so3([0.0, 0.0, np.deg2rad(1.0)]),
                                     np.array([0.1, 0.0, 0.0]))
    assert len(m) == size0
    # large translation: inserted, map grows by the downsampled count
    far = pts + np.array([50.0, 0.0, 0.0])
    added_before = len(m)
    assert maybe_insert_keyframe(m, far, 0.2, Rotation.identity(),
                                 np.array([0.6, 0.0, 0.0]))
    assert len(m) == added_before + len(voxel_downsample(far, 0.1))
    # large rotation alone also triggers
    assert maybe_insert_keyframe(m, pts, 0.3, exp_so3([0.0, 0.0, np.deg2rad(11.0)]),
                                 np.array([0.6, 0.0, 0.0]),
                                 cfg=KeyframeConfig())
    assert len(m.keyframes) == 3


def test_scan_file_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    scan = Scan(t_start=1.25, period=0.1, points=rng.normal(size=(17, 3)),
                offsets=np.sort(rng.uniform(0, 0.1, 17)))
    path = tmp_path / "scan.txt"
    save_scan(path, scan)
    back = load_scan(path)
    assert back.t_start == pytest.approx(scan.t_start)
    assert back.period == pytest.approx(scan.period)
    np.testing.assert_allclose(back.points, scan.points, atol=1e-5)
    np.testing.assert_allclose(back.offsets, scan.offsets, atol=1e-8)


def test_map_export(tmp_path):
    m = make_map(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    path = tmp_path / "map.xyz"
    m.export_xyz(path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 2
    assert lines[0].split() == ["1.000000", "2.000000", "3.000000"]

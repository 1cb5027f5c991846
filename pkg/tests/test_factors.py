import numpy as np
import pytest

from ctlio.bspline import KnotState, SplineTrajectory
from ctlio.factors import (
    KNOT_DOF,
    MarginalPrior,
    bias_walk_residual,
    cvp_residual,
    hfp_residual,
    lfp_residual,
    lidar_batch_residual,
    lidar_information_row,
    lidar_residual,
    marginal_prior_residual,
)
from ctlio.imu import (
    ImuMeasurement,
    gravity_vector,
    preintegrate,
)
from ctlio.lie import Rotation, exp_so3, log_so3

G = gravity_vector()


def random_trajectory(rng, k=4, n_knots=8, dt=0.05, bias_scale=0.05):
    knots = []
    r = Rotation.identity()
    r = exp_so3(rng.normal(size=3) * 0.5)
    for _ in range(n_knots):
        r = r * exp_so3(rng.normal(size=3) * 0.15)
        knots.append(KnotState(Rotation(r.q), rng.normal(size=3),
                               rng.normal(size=3) * bias_scale,
                               rng.normal(size=3) * bias_scale))
    return SplineTrajectory(k, dt, 0.0, knots)


def perturbed(traj, knot, dim, h):
    out = SplineTrajectory(traj.k, traj.dt, traj.t0,
                           [kn.copy() for kn in traj.knots])
    delta = np.zeros(KNOT_DOF)
    delta[dim] = h
    out.apply_knot_update(knot, delta[0:3], delta[3:6], delta[6:9], delta[9:12])
    return out


def fd_check(traj, eval_fn, fr, h=1e-6, tol=1e-5):
    """Central finite differences over every touched knot dimension."""
    for knot, J in fr.jac.items():
        J_fd = np.zeros_like(J)
        for d in range(KNOT_DOF):
            rp = eval_fn(perturbed(traj, knot, d, +h)).r
            rm = eval_fn(perturbed(traj, knot, d, -h)).r
            J_fd[:, d] = (rp - rm) / (2 * h)
        err = np.linalg.norm(J_fd - J) / max(1.0, np.linalg.norm(J_fd))
        assert err < tol, f"knot {knot}: rel error {err:.2e}"


# ---------------------------------------------------------------------------
# CVP


def gravity_aligned_measurement(traj, t, rng=None):
    ev = traj.evaluate(t, need_jacobians=False)
    a_b = -ev.R.matrix().T @ G + ev.b_a
    return ImuMeasurement(t, a_b, np.zeros(3))


def test_cvp_zero_at_aligned_state():
    rng = np.random.default_rng(0)
    traj = random_trajectory(rng)
    t = 0.11
    fr = cvp_residual(traj, t, gravity_aligned_measurement(traj, t), G)
    np.testing.assert_allclose(fr.r, 0.0, atol=1e-12)


def test_cvp_one_degree_pitch_error():
    traj = SplineTrajectory.constant(4, 0.05, 0.0, 8)
    t = 0.11
    m = ImuMeasurement(t, -G, np.zeros(3))  # truthful gravity reading
    for kn in traj.knots:  # inject pure pitch error into the state
        kn.R = exp_so3(np.deg2rad(1.0) * np.array([0.0, 1.0, 0.0])) * kn.R
    fr = cvp_residual(traj, t, m, G)
    assert np.linalg.norm(fr.r) == pytest.approx(np.sin(np.deg2rad(1.0)), abs=1e-9)


def test_cvp_yaw_invariant():
    rng = np.random.default_rng(1)
    traj = random_trajectory(rng)
    t = 0.13
    m = ImuMeasurement(t, rng.normal(size=3), np.zeros(3))
    base = cvp_residual(traj, t, m, G).r
    g_hat = G / np.linalg.norm(G)
    for _ in range(10):
        yaw = rng.uniform(-np.pi, np.pi)
        spun = SplineTrajectory(traj.k, traj.dt, traj.t0,
                                [kn.copy() for kn in traj.knots])
        W = exp_so3(yaw * g_hat)
        for kn in spun.knots:
            kn.R = W * kn.R
        r = cvp_residual(spun, t, m, G).r
        assert np.max(np.abs(r - base)) < 1e-12


def test_cvp_jacobians_fd():
    rng = np.random.default_rng(2)
    for _ in range(20):
        traj = random_trajectory(rng)
        t = rng.uniform(0.01, traj.t_end - 0.01)
        m = ImuMeasurement(t, rng.normal(size=3) * 3.0, np.zeros(3))
        fr = cvp_residual(traj, t, m, G)
        fd_check(traj, lambda tr: cvp_residual(tr, t, m, G), fr)


# ---------------------------------------------------------------------------
# HFP


def imu_from_trajectory(traj, t0, t1, rate=200.0, bias_a=None, bias_g=None):
    """Noise-free IMU samples consistent with the spline motion."""
    n = int(round((t1 - t0) * rate))
    out = []
    for i in range(n + 1):
        t = t0 + i / rate
        ev = traj.evaluate(min(t, traj.t_end - 1e-9), need_jacobians=False)
        a_b = ev.R.matrix().T @ (ev.a - G)
        w_b = ev.omega
        if bias_a is not None:
            a_b = a_b + bias_a
        if bias_g is not None:
            w_b = w_b + bias_g
        out.append(ImuMeasurement(t, a_b, w_b))
    return out


def test_hfp_zero_motion_zero_input():
    traj = SplineTrajectory.constant(4, 0.05, 0.0, 8)
    burst = [ImuMeasurement(0.05 + i * 0.005, -G, np.zeros(3)) for i in range(11)]
    pre = preintegrate(burst, np.zeros(3), np.zeros(3))
    fr = hfp_residual(traj, pre, 0.05, 0.10, G)
    np.testing.assert_allclose(fr.r, 0.0, atol=1e-10)


def test_hfp_consistent_trajectory_near_zero():
    # IMU generated from the spline itself: residual ~ integration error.
    # Walking-scale dynamics (cm-level knot steps) keep that error small.
    rng = np.random.default_rng(3)
    knots = []
    r = exp_so3(rng.normal(size=3) * 0.3)
    p = rng.normal(size=3)
    for _ in range(10):
        r = r * exp_so3(rng.normal(size=3) * 0.05)
        p = p + rng.normal(size=3) * 0.05
        knots.append(KnotState(Rotation(r.q), p.copy(), np.zeros(3), np.zeros(3)))
    traj = SplineTrajectory(4, 0.05, 0.0, knots)
    t0, t1 = 0.10, 0.15
    burst = imu_from_trajectory(traj, t0, t1, rate=8000.0)
    pre = preintegrate(burst, np.zeros(3), np.zeros(3))
    fr = hfp_residual(traj, pre, t0, t1, G)
    assert np.linalg.norm(fr.r) < 1e-6


def test_hfp_translation_invariant():
    rng = np.random.default_rng(4)
    traj = random_trajectory(rng)
    t0, t1 = 0.05, 0.10
    burst = imu_from_trajectory(traj, t0, t1)
    pre = preintegrate(burst, np.zeros(3), np.zeros(3))
    r0 = hfp_residual(traj, pre, t0, t1, G).r
    shifted = SplineTrajectory(traj.k, traj.dt, traj.t0,
                               [kn.copy() for kn in traj.knots])
    offset = np.array([10.0, -20.0, 5.0])
    for kn in shifted.knots:
        kn.p = kn.p + offset
    r1 = hfp_residual(shifted, pre, t0, t1, G).r
    np.testing.assert_allclose(r1, r0, atol=1e-10)


def test_hfp_window_mismatch_rejected():
    rng = np.random.default_rng(5)
    traj = random_trajectory(rng)
    burst = imu_from_trajectory(traj, 0.05, 0.10)
    pre = preintegrate(burst, np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        hfp_residual(traj, pre, 0.05, 0.20, G)


def test_hfp_jacobians_fd():
    rng = np.random.default_rng(6)
    for _ in range(10):
        traj = random_trajectory(rng)
        t0 = traj.dt * rng.integers(1, 4)
        t1 = t0 + traj.dt
        burst = imu_from_trajectory(traj, t0, t1,
                                    bias_a=rng.normal(size=3) * 0.05,
                                    bias_g=rng.normal(size=3) * 0.02)
        pre = preintegrate(burst, rng.normal(size=3) * 0.01,
                           rng.normal(size=3) * 0.01)
        fr = hfp_residual(traj, pre, t0, t1, G)
        fd_check(traj, lambda tr: hfp_residual(tr, pre, t0, t1, G), fr)


# ---------------------------------------------------------------------------
# LFP


def test_lfp_zero_for_consistent_imu():
    rng = np.random.default_rng(7)
    traj = random_trajectory(rng, bias_scale=0.0)
    for t in (0.02, 0.11, 0.18):
        ev = traj.evaluate(t, need_jacobians=False)
        m = ImuMeasurement(t, ev.R.matrix().T @ (ev.a - G), ev.omega)
        fr = lfp_residual(traj, t, m, G)
        np.testing.assert_allclose(fr.r, 0.0, atol=1e-7)


def test_lfp_static_stationary_zero():
    traj = SplineTrajectory.constant(4, 0.05, 0.0, 8)
    m = ImuMeasurement(0.07, -G, np.zeros(3))
    fr = lfp_residual(traj, 0.07, m, G)
    np.testing.assert_allclose(fr.r, 0.0, atol=1e-12)


def test_lfp_gyro_bias_appears_negated():
    traj = SplineTrajectory.constant(4, 0.05, 0.0, 8)
    bias = 0.01
    m = ImuMeasurement(0.07, -G, np.full(3, bias))
    fr = lfp_residual(traj, 0.07, m, G)
    np.testing.assert_allclose(fr.r[3:], -bias, atol=1e-12)


def test_lfp_jacobians_fd():
    rng = np.random.default_rng(8)
    for _ in range(20):
        traj = random_trajectory(rng)
        t = rng.uniform(0.01, traj.t_end - 0.01)
        m = ImuMeasurement(t, rng.normal(size=3) * 3.0, rng.normal(size=3))
        fr = lfp_residual(traj, t, m, G)
        fd_check(traj, lambda tr: lfp_residual(tr, t, m, G), fr)


# ---------------------------------------------------------------------------
# LiDAR


def test_lidar_point_on_plane_zero():
    rng = np.random.default_rng(9)
    traj = random_trajectory(rng)
    t = 0.12
    R, p = traj.eval_pose(t)
    n = np.array([0.0, 0.0, 1.0])
    mu = np.array([1.0, 2.0, 0.5])
    # choose a world point on the plane, then pull it into the body frame
    q_w = mu + np.array([0.3, -0.7, 0.0])
    f = R.matrix().T @ (q_w - p)
    fr = lidar_residual(traj, t, f, n, mu)
    assert abs(fr.r[0]) < 1e-12


def test_lidar_translation_along_normal():
    traj = SplineTrajectory.constant(4, 0.05, 0.0, 8)
    n = np.array([0.0, 0.0, 1.0])
    mu = np.zeros(3)
    f = np.array([1.0, 2.0, 0.25])
    fr = lidar_residual(traj, 0.12, f, n, mu)
    assert fr.r[0] == pytest.approx(0.25, abs=1e-12)


def test_lidar_rejects_non_unit_normal():
    traj = SplineTrajectory.constant(4, 0.05, 0.0, 8)
    with pytest.raises(ValueError):
        lidar_residual(traj, 0.1, np.zeros(3), np.array([0.0, 0.0, 2.0]),
                       np.zeros(3))


def test_lidar_jacobians_fd():
    rng = np.random.default_rng(10)
    for _ in range(20):
        traj = random_trajectory(rng)
        t = rng.uniform(0.01, traj.t_end - 0.01)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        f = rng.normal(size=3) * 3.0
        mu = rng.normal(size=3)
        fr = lidar_residual(traj, t, f, n, mu)
        fd_check(traj, lambda tr: lidar_residual(tr, t, f, n, mu), fr)


def test_lidar_batch_matches_single():
    rng = np.random.default_rng(11)
    traj = random_trajectory(rng)
    t = 0.09
    ev = traj.evaluate(t)
    pts = rng.normal(size=(6, 3)) * 2.0
    ns = rng.normal(size=(6, 3))
    ns /= np.linalg.norm(ns, axis=1, keepdims=True)
    mus = rng.normal(size=(6, 3))
    batch = lidar_batch_residual(ev, pts, ns, mus)
    for i in range(6):
        single = lidar_residual(traj, t, pts[i], ns[i], mus[i])
        assert batch.r[i] == pytest.approx(single.r[0], abs=1e-12)
        for knot, J in single.jac.items():
            np.testing.assert_allclose(batch.jac[knot][i], J[0], atol=1e-12)


def test_lidar_information_row_matches_center_column():
    rng = np.random.default_rng(12)
    traj = random_trajectory(rng)
    t = 0.145
    ev = traj.evaluate(t)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    f = rng.normal(size=3)
    mu = rng.normal(size=3)
    center, row = lidar_information_row(ev, f, n)
    assert center == ev.segment + int(np.argmax(ev.weight))
    fr = lidar_residual(traj, t, f, n, mu)
    np.testing.assert_allclose(row[:3], fr.jac[center][0, 0:3], atol=1e-12)
    np.testing.assert_allclose(row[3:], fr.jac[center][0, 3:6], atol=1e-12)


# ---------------------------------------------------------------------------
# Marginal prior


def make_prior(traj, indices, H, g=None):
    lin = [traj.knots[i].copy() for i in indices]
    return MarginalPrior.from_information(indices, lin, H, g)


def test_prior_zero_at_linearization_point():
    rng = np.random.default_rng(13)
    traj = random_trajectory(rng)
    n = 2
    A = rng.normal(size=(KNOT_DOF * n, KNOT_DOF * n))
    H = A @ A.T + 0.1 * np.eye(KNOT_DOF * n)
    prior = make_prior(traj, [1, 2], H)
    fr = marginal_prior_residual(traj, prior)
    np.testing.assert_allclose(fr.r, 0.0, atol=1e-12)


def test_prior_quadratic_growth():
    rng = np.random.default_rng(14)
    traj = random_trajectory(rng)
    H = np.eye(KNOT_DOF)
    prior = make_prior(traj, [3], H)
    delta = rng.normal(size=KNOT_DOF) * 1e-4
    costs = []
    for scale in (1.0, 2.0):
        pert = SplineTrajectory(traj.k, traj.dt, traj.t0,
                                [kn.copy() for kn in traj.knots])
        d = delta * scale
        pert.apply_knot_update(3, d[0:3], d[3:6], d[6:9], d[9:12])
        costs.append(np.sum(marginal_prior_residual(pert, prior).r ** 2))
    assert costs[1] / costs[0] == pytest.approx(4.0, abs=1e-6)


def test_prior_identity_information_is_unit_penalty():
    traj = SplineTrajectory.constant(4, 0.05, 0.0, 8)
    prior = make_prior(traj, [0], np.eye(KNOT_DOF))
    pert = SplineTrajectory(traj.k, traj.dt, traj.t0,
                            [kn.copy() for kn in traj.knots])
    pert.apply_knot_update(0, np.zeros(3), [1.0, 0.0, 0.0], np.zeros(3), np.zeros(3))
    fr = marginal_prior_residual(pert, prior)
    assert np.sum(fr.r ** 2) == pytest.approx(1.0, abs=1e-12)


def test_prior_jacobians_fd():
    rng = np.random.default_rng(15)
    for _ in range(10):
        traj = random_trajectory(rng)
        n = 2
        A = rng.normal(size=(KNOT_DOF * n, KNOT_DOF * n))
        H = A @ A.T + 0.5 * np.eye(KNOT_DOF * n)
        g = rng.normal(size=KNOT_DOF * n)
        prior = make_prior(traj, [2, 3], H, g)
        # move away from the linearization point to exercise the log chain
        pert = SplineTrajectory(traj.k, traj.dt, traj.t0,
                                [kn.copy() for kn in traj.knots])
        for idx in (2, 3):
            pert.apply_knot_update(idx, rng.normal(size=3) * 0.05,
                                   rng.normal(size=3) * 0.1,
                                   rng.normal(size=3) * 0.01,
                                   rng.normal(size=3) * 0.01)
        fr = marginal_prior_residual(pert, prior)
        fd_check(pert, lambda tr: marginal_prior_residual(tr, prior), fr)


def test_prior_dimension_mismatch_rejected():
    traj = SplineTrajectory.constant(4, 0.05, 0.0, 8)
    prior = make_prior(traj, [0], np.eye(KNOT_DOF))
    prior.knot_indices = [0, 1]
    prior.lin_states.append(traj.knots[1].copy())
    with pytest.raises(ValueError):
        marginal_prior_residual(traj, prior)


# ---------------------------------------------------------------------------
# Bias walk


def test_bias_walk_residual_and_fd():
    rng = np.random.default_rng(16)
    traj = random_trajectory(rng)
    cov = np.eye(6) * 0.01
    fr = bias_walk_residual(traj, 2, 3, cov)
    np.testing.assert_allclose(
        fr.r, np.concatenate([traj.knots[3].b_a - traj.knots[2].b_a,
                              traj.knots[3].b_g - traj.knots[2].b_g]), atol=0.0)
    fd_check(traj, lambda tr: bias_walk_residual(tr, 2, 3, cov), fr)

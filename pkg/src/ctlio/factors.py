"""Residuals and analytic Jacobians for the sliding-window objective.

Five measurement families plus a bias random-walk regularizer:

    - cvp:   2-D gravity-alignment residual at constant-velocity instants,
             observing roll/pitch only;
    - hfp:   9-D pre-integrated relative-motion residual over one
             high-frequency segment;
    - lfp:   6-D raw accelerometer/gyro residual per IMU sample in
             low-frequency segments;
    - lidar: scalar point-to-plane residual;
    - prior: marginalization prior in whitened form;
    - bias_walk: random-walk penalty between consecutive knot biases.

Every knot has a 12-D local perturbation [dtheta, dp, db_a, db_g] with
rotations perturbed on the left: R <- Exp(dtheta) R. Jacobian blocks are
keyed by global knot index. Measurement minus bias is used everywhere
(see the imu module docstring for the sign conventions).
"""

from dataclasses import dataclass, field

import numpy as np

from .bspline import SegmentEval, SplineTrajectory
from .imu import ImuMeasurement, Preintegration
from .lie import (
    Rotation,
    exp_so3,
    left_jacobian_inv,
    log_so3,
    right_jacobian,
    right_jacobian_inv,
    skew,
)

KNOT_DOF = 12
_TH = slice(0, 3)
_P = slice(3, 6)
_BA = slice(6, 9)
_BG = slice(9, 12)


@dataclass
class FactorResidual:
    """Residual vector, per-knot Jacobian blocks, and covariance."""

    r: np.ndarray
    jac: dict
    cov: np.ndarray


class EvalCache:
    """Memoizes spline evaluations within a single linearization pass."""

    def __init__(self, traj: SplineTrajectory):
        self.traj = traj
        self._store = {}

    def at(self, t: float) -> SegmentEval:
        key = round(t, 12)
        ev = self._store.get(key)
        if ev is None:
            ev = self.traj.evaluate(t)
            self._store[key] = ev
        return ev


def _eval(traj, t, cache):
    return cache.at(t) if cache is not None else traj.evaluate(t)


# ---------------------------------------------------------------------------
# CVP

def cvp_residual(traj: SplineTrajectory, t: float, m: ImuMeasurement, g_w,
                 cov: np.ndarray | None = None,
                 cache: EvalCache | None = None) -> FactorResidual:
    """Gravity-alignment residual at a constant-velocity instant.

    r = [ (a_b - b_a(t)) + R(t)^T g_w ]_{xy} / ||g_w||; only the first two
    components are kept, so world yaw is unobservable by construction.
    """
    g_w = np.asarray(g_w, dtype=float)
    g0 = np.linalg.norm(g_w)
    ev = _eval(traj, t, cache)
    e = (m.a_b - ev.b_a) + ev.R.matrix().T @ g_w
    r = e[:2] / g0

    RTg = ev.R.matrix().T @ skew(g_w)
    i0 = ev.segment
    jac = {}
    for s in range(traj.k):
        J = np.zeros((2, KNOT_DOF))
        J[:, _TH] = (RTg @ ev.rot_jac[s])[:2, :] / g0
        J[:, _BA] = -(ev.weight[s] / g0) * np.eye(3)[:2, :]
        jac[i0 + s] = J
    if cov is None:
        cov = np.eye(2)
    return FactorResidual(r=r, jac=jac, cov=cov)


# ---------------------------------------------------------------------------
# HFP

def hfp_residual(traj: SplineTrajectory, pre: Preintegration, t_start: float,
                 t_end: float, g_w, cov: np.ndarray | None = None,
                 cache: EvalCache | None = None) -> FactorResidual:
    """Pre-integrated relative-motion residual over [t_start, t_end].

    Stacks (delta_p, delta_v, log delta_q) of the measurement, first-order
    corrected to the interpolated biases at t_start, minus the spline
    prediction; spline velocities come from the analytic derivative.
    """
    if abs(pre.duration - (t_end - t_start)) > 1e-6:
        raise ValueError("pre-integration window does not match segment bounds")
    g_w = np.asarray(g_w, dtype=float)
    dt = t_end - t_start
    ea = _eval(traj, t_start, cache)
    eb = _eval(traj, t_end, cache)
    Ra = ea.R.matrix()
    Rb = eb.R.matrix()

    dp_m, dv_m, dq_m = pre.corrected(ea.b_a, ea.b_g)
    y = eb.p - ea.p - ea.v * dt - 0.5 * g_w * dt * dt
    z = eb.v - ea.v - g_w * dt
    r_p = dp_m - Ra.T @ y
    r_v = dv_m - Ra.T @ z
    Q = Rotation.from_matrix(Rb.T @ Ra) * dq_m
    r_R = log_so3(Q)
    r = np.concatenate([r_p, r_v, r_R])

    Jl_inv = left_jacobian_inv(r_R)
    Jr_inv = right_jacobian_inv(r_R)
    # chain through the applied bias correction Exp(J_q_bg (b - ref))
    xi = pre.J_q_bg @ (ea.b_g - pre.b_g)
    dq_bg = Jr_inv @ right_jacobian(xi) @ pre.J_q_bg
    RaT_sy = Ra.T @ skew(y)
    RaT_sz = Ra.T @ skew(z)

    k = traj.k
    ia, ib = ea.segment, eb.segment
    jac = {}
    for idx in range(min(ia, ib), max(ia, ib) + k):
        jac[idx] = np.zeros((9, KNOT_DOF))
    for s in range(k):
        J = jac[ia + s]
        Ea = ea.rot_jac[s]
        wa, dwa = ea.weight[s], ea.dweight[s]
        J[0:3, _TH] += -RaT_sy @ Ea
        J[3:6, _TH] += -RaT_sz @ Ea
        J[6:9, _TH] += Jl_inv @ Rb.T @ Ea
        J[0:3, _P] += -Ra.T * (-wa - dwa * dt)
        J[3:6, _P] += -Ra.T * (-dwa)
        J[0:3, _BA] += pre.J_p_ba * wa
        J[0:3, _BG] += pre.J_p_bg * wa
        J[3:6, _BA] += pre.J_v_ba * wa
        J[3:6, _BG] += pre.J_v_bg * wa
        J[6:9, _BG] += dq_bg * wa
    for s in range(k):
        J = jac[ib + s]
        Eb = eb.rot_jac[s]
        wb, dwb = eb.weight[s], eb.dweight[s]
        J[6:9, _TH] += -Jl_inv @ Rb.T @ Eb
        J[0:3, _P] += -Ra.T * wb
        J[3:6, _P] += -Ra.T * dwb
    if cov is None:
        cov = pre.cov + 1e-14 * np.eye(9)
    return FactorResidual(r=r, jac=jac, cov=cov)


# ---------------------------------------------------------------------------
# LFP

def lfp_residual(traj: SplineTrajectory, t: float, m: ImuMeasurement, g_w,
                 cov: np.ndarray | None = None,
                 cache: EvalCache | None = None) -> FactorResidual:
    """Raw-measurement residual: spline accel/rate minus corrected IMU.

    Top block: p_ddot(t) - (R(t)(a_b - b_a(t)) + g_w), world frame.
    Bottom block: omega_spline(t) - (w_b - b_g(t)), body frame.
    """
    g_w = np.asarray(g_w, dtype=float)
    ev = _eval(traj, t, cache)
    Rm = ev.R.matrix()
    c = m.a_b - ev.b_a
    Rc = Rm @ c
    r = np.concatenate([ev.a - (Rc + g_w), ev.omega - (m.w_b - ev.b_g)])

    sk_Rc = skew(Rc)
    i0 = ev.segment
    jac = {}
    for s in range(traj.k):
        J = np.zeros((6, KNOT_DOF))
        J[0:3, _TH] = sk_Rc @ ev.rot_jac[s]
        J[0:3, _P] = ev.ddweight[s] * np.eye(3)
        J[0:3, _BA] = ev.weight[s] * Rm
        J[3:6, _TH] = ev.omega_jac[s]
        J[3:6, _BG] = ev.weight[s] * np.eye(3)
        jac[i0 + s] = J
    if cov is None:
        cov = np.eye(6)
    return FactorResidual(r=r, jac=jac, cov=cov)


# ---------------------------------------------------------------------------
# LiDAR point-to-plane

def lidar_residual(traj: SplineTrajectory, t: float, point_body, n, mu,
                   sigma: float = 0.03,
                   cache: EvalCache | None = None) -> FactorResidual:
    """Scalar point-to-plane residual r = n^T (R(t) f + p(t) - mu)."""
    n = np.asarray(n, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise ValueError("plane normal must be unit length")
    f = np.asarray(point_body, dtype=float)
    mu = np.asarray(mu, dtype=float)
    ev = _eval(traj, t, cache)
    Rf = ev.R.rotate(f)
    r = np.array([n @ (Rf + ev.p - mu)])

    c = np.cross(n, Rf)
    i0 = ev.segment
    jac = {}
    for s in range(traj.k):
        J = np.zeros((1, KNOT_DOF))
        J[0, _TH] = -c @ ev.rot_jac[s]
        J[0, _P] = ev.weight[s] * n
        jac[i0 + s] = J
    return FactorResidual(r=r, jac=jac, cov=np.array([[sigma * sigma]]))


def lidar_batch_residual(ev: SegmentEval, points, normals, mus,
                         sigma: float = 0.03) -> FactorResidual:
    """Stacked point-to-plane residuals for points sharing one timestamp."""
    F = np.asarray(points, dtype=float)
    N = np.asarray(normals, dtype=float)
    MU = np.asarray(mus, dtype=float)
    n_pts = F.shape[0]
    RF = ev.R.rotate(F)
    r = np.einsum("ij,ij->i", N, RF + ev.p[None, :] - MU)
    C = np.cross(N, RF)
    i0 = ev.segment
    k = len(ev.weight)
    jac = {}
    for s in range(k):
        J = np.zeros((n_pts, KNOT_DOF))
        J[:, _TH] = -C @ ev.rot_jac[s]
        J[:, _P] = ev.weight[s] * N
        jac[i0 + s] = J
    return FactorResidual(r=r, jac=jac, cov=sigma * sigma * np.eye(n_pts))


def lidar_information_row(ev: SegmentEval, point_body, n) -> tuple[int, np.ndarray]:
    """(center knot index, 1x6 Jacobian row) used by feature selection.

    The center knot is the stencil knot with the largest basis weight;
    the row stacks the rotation and translation Jacobians of the scalar
    point-to-plane residual with respect to that single knot.
    """
    n = np.asarray(n, dtype=float)
    f = np.asarray(point_body, dtype=float)
    s = int(np.argmax(ev.weight))
    c = np.cross(n, ev.R.rotate(f))
    row = np.empty(6)
    row[:3] = -c @ ev.rot_jac[s]
    row[3:] = ev.weight[s] * n
    return ev.segment + s, row


# ---------------------------------------------------------------------------
# Marginalization prior

@dataclass
class MarginalPrior:
    """Gaussian prior on a set of knots, stored in whitened form.

    residual(x) = r0 + S * dx(x), where dx stacks the 12-D local
    coordinates of each knot relative to the stored linearization point
    and S^T S equals the prior information matrix.
    """

    knot_indices: list
    lin_states: list
    sqrt_info: np.ndarray
    r0: np.ndarray

    @staticmethod
    def from_information(knot_indices, lin_states, H: np.ndarray,
                         g: np.ndarray | None = None,
                         eig_floor: float = 1e-10) -> "MarginalPrior":
        """Build the whitened form from an information matrix and gradient.

        The quadratic cost 0.5 dx^T H dx + g^T dx is reproduced (up to a
        constant) by 0.5 ||r0 + S dx||^2 with S from the eigen square
        root of H and r0 = pinv(S^T) g.
        """
        H = 0.5 * (H + H.T)
        w, V = np.linalg.eigh(H)
        keep = w > eig_floor * max(w.max(initial=0.0), 1.0)
        S = (np.sqrt(w[keep])[:, None] * V[:, keep].T)
        if g is None:
            r0 = np.zeros(S.shape[0])
        else:
            # S^T r0 = g  =>  r0 = diag(1/sqrt(w)) V^T g on the kept subspace
            r0 = (V[:, keep].T @ g) / np.sqrt(w[keep])
        return MarginalPrior(list(knot_indices), [s.copy() for s in lin_states],
                             S, r0)

    def dimension(self) -> int:
        return self.sqrt_info.shape[0]


def marginal_prior_residual(traj: SplineTrajectory,
                            prior: MarginalPrior) -> FactorResidual:
    n = len(prior.knot_indices)
    if prior.sqrt_info.shape[1] != KNOT_DOF * n:
        raise ValueError("prior dimension does not match knot count")
    dx = np.zeros(KNOT_DOF * n)
    corr = []
    for j, (idx, lin) in enumerate(zip(prior.knot_indices, prior.lin_states)):
        kn = traj.knots[idx]
        dth = log_so3(kn.R * lin.R.inverse())
        dx[KNOT_DOF * j + 0: KNOT_DOF * j + 3] = dth
        dx[KNOT_DOF * j + 3: KNOT_DOF * j + 6] = kn.p - lin.p
        dx[KNOT_DOF * j + 6: KNOT_DOF * j + 9] = kn.b_a - lin.b_a
        dx[KNOT_DOF * j + 9: KNOT_DOF * j + 12] = kn.b_g - lin.b_g
        corr.append(left_jacobian_inv(dth))
    r = prior.r0 + prior.sqrt_info @ dx
    jac = {}
    for j, idx in enumerate(prior.knot_indices):
        block = prior.sqrt_info[:, KNOT_DOF * j: KNOT_DOF * (j + 1)].copy()
        block[:, 0:3] = block[:, 0:3] @ corr[j]
        jac[idx] = block
    return FactorResidual(r=r, jac=jac, cov=np.eye(len(r)))


# ---------------------------------------------------------------------------
# Bias random walk between consecutive knots

def bias_walk_residual(traj: SplineTrajectory, i: int, j: int,
                       cov: np.ndarray) -> FactorResidual:
    """r = (b_a_j - b_a_i, b_g_j - b_g_i); keeps knot biases a random walk."""
    ki, kj = traj.knots[i], traj.knots[j]
    r = np.concatenate([kj.b_a - ki.b_a, kj.b_g - ki.b_g])
    Ji = np.zeros((6, KNOT_DOF))
    Ji[0:3, _BA] = -np.eye(3)
    Ji[3:6, _BG] = -np.eye(3)
    Jj = np.zeros((6, KNOT_DOF))
    Jj[0:3, _BA] = np.eye(3)
    Jj[3:6, _BG] = np.eye(3)
    return FactorResidual(r=r, jac={i: Ji, j: Jj}, cov=cov)


# ---------------------------------------------------------------------------
# Factor objects consumed by the window solver

@dataclass
class CvpFactor:
    t: float
    meas: ImuMeasurement
    g_w: np.ndarray
    cov: np.ndarray
    family: str = "cvp"

    def evaluate(self, traj, cache=None) -> FactorResidual:
        return cvp_residual(traj, self.t, self.meas, self.g_w, self.cov, cache)


@dataclass
class HfpFactor:
    t_start: float
    t_end: float
    pre: Preintegration
    g_w: np.ndarray
    family: str = "hfp"

    def evaluate(self, traj, cache=None) -> FactorResidual:
        return hfp_residual(traj, self.pre, self.t_start, self.t_end,
                            self.g_w, None, cache)


@dataclass
class LfpFactor:
    meas: ImuMeasurement
    g_w: np.ndarray
    cov: np.ndarray
    family: str = "lfp"

    def evaluate(self, traj, cache=None) -> FactorResidual:
        return lfp_residual(traj, self.meas.t, self.meas, self.g_w,
                            self.cov, cache)


@dataclass
class LidarBundleFactor:
    """All selected correspondences of one pose-time bin."""

    t: float
    points: np.ndarray
    normals: np.ndarray
    mus: np.ndarray
    sigma: float
    family: str = "lidar"

    def evaluate(self, traj, cache=None) -> FactorResidual:
        ev = cache.at(self.t) if cache is not None else traj.evaluate(self.t)
        return lidar_batch_residual(ev, self.points, self.normals, self.mus,
                                    self.sigma)


@dataclass
class PriorFactor:
    prior: MarginalPrior
    family: str = "prior"

    def evaluate(self, traj, cache=None) -> FactorResidual:
        return marginal_prior_residual(traj, self.prior)


@dataclass
class BiasWalkFactor:
    i: int
    j: int
    cov: np.ndarray
    family: str = "bias_walk"

    def evaluate(self, traj, cache=None) -> FactorResidual:
        return bias_walk_residual(traj, self.i, self.j, self.cov)

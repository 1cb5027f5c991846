"""Uniform cumulative B-spline trajectory over SO(3) x R^9 knots.

A knot holds rotation, position, and the two IMU biases. Rotation is
interpolated with the cumulative Lie-group product

    R(u) = R_i * prod_j Exp(lam_j(u) * Log(R_{i+j-1}^T R_{i+j})),

position and biases with the matching cumulative form on R^3. lam_j(u) is
row j of Mtilde times the monomial vector (1, u, ..., u^{k-1}).

Besides values and time derivatives, evaluation can produce analytic
Jacobians with respect to local knot perturbations (left-multiplicative
Exp(dtheta) on rotations, additive on vectors); these feed the residual
factors and the window solver.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from math import comb, factorial

import numpy as np

from .lie import (
    Rotation,
    exp_so3,
    left_jacobian,
    left_jacobian_inv,
    log_so3,
    right_jacobian_inv,
    skew,
)


class SplineRangeError(ValueError):
    """Evaluation time outside the valid span of the trajectory."""


def blending_matrix(k: int) -> "BlendingMatrices":
    """Order-k blending matrix M and its cumulative form Mtilde.

    M is indexed [knot offset s, monomial power n], so that the basis of
    knot i+s on a segment is sum_n M[s, n] u^n and

        p(u) = [p_i ... p_{i+k-1}] @ M @ (1, u, ..., u^{k-1})^T.

    Entries are computed in exact rational arithmetic and converted once,
    which keeps the result bit-reproducible.
    """
    if not 2 <= k <= 8:
        raise ValueError(f"spline order must be in [2, 8], got {k}")
    m = [[Fraction(0)] * k for _ in range(k)]
    for s in range(k):
        for n in range(k):
            acc = Fraction(0)
            for ell in range(s, k):
                acc += (-1) ** (ell - s) * comb(k, ell - s) * Fraction(k - ell - 1) ** (k - 1 - n)
            m[s][n] = Fraction(comb(k - 1, n), factorial(k - 1)) * acc
    mt = [[sum(m[s][n] for s in range(j, k)) for n in range(k)] for j in range(k)]
    M = np.array([[float(v) for v in row] for row in m])
    Mt = np.array([[float(v) for v in row] for row in mt])
    return BlendingMatrices(k=k, M=M, Mtilde=Mt)


@dataclass(frozen=True)
class BlendingMatrices:
    k: int
    M: np.ndarray
    Mtilde: np.ndarray


@dataclass
class KnotState:
    """One control point: body-to-world rotation, position, IMU biases."""

    R: Rotation
    p: np.ndarray
    b_a: np.ndarray
    b_g: np.ndarray

    @staticmethod
    def identity() -> "KnotState":
        return KnotState(Rotation.identity(), np.zeros(3), np.zeros(3), np.zeros(3))

    def copy(self) -> "KnotState":
        return KnotState(Rotation(self.R.q), self.p.copy(), self.b_a.copy(), self.b_g.copy())


@dataclass(frozen=True)
class ActiveRange:
    """Knot indices [first, last] whose values affect a time interval."""

    first: int
    last: int
    t_start: float
    t_end: float

    def indices(self) -> range:
        return range(self.first, self.last + 1)


@dataclass
class SegmentEval:
    """Everything one evaluation time yields: values, rates, Jacobians.

    Jacobian blocks are indexed by local stencil position s (global knot
    index = segment + s). rot_jac[s] maps a left perturbation dtheta of
    knot s to the left perturbation of R(t); omega_jac[s] maps it to the
    change of body angular velocity. weight/dweight/ddweight are the
    scalar coefficients of the position/bias knots for value, velocity
    and acceleration.
    """

    segment: int
    u: float
    R: Rotation
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    omega: np.ndarray
    b_a: np.ndarray
    b_g: np.ndarray
    weight: np.ndarray
    dweight: np.ndarray
    ddweight: np.ndarray
    rot_jac: list = field(default_factory=list)
    omega_jac: list = field(default_factory=list)


class SplineTrajectory:
    """Uniform cumulative B-spline with at least k knots.

    Segment i spans [t0 + i*dt, t0 + (i+1)*dt) (half-open) and is
    controlled by knots i..i+k-1; valid evaluation times are
    t0 <= t < t0 + (n_knots - k + 1) * dt.
    """

    def __init__(self, order: int, knot_dt: float, t0: float, knots: list):
        if len(knots) < order:
            raise ValueError(f"need at least {order} knots, got {len(knots)}")
        if knot_dt <= 0.0:
            raise ValueError("knot interval must be positive")
        self.k = order
        self.dt = float(knot_dt)
        self.t0 = float(t0)
        self.knots = list(knots)
        self.blend = blending_matrix(order)

    @staticmethod
    def constant(order: int, knot_dt: float, t0: float, n_knots: int,
                 state: KnotState | None = None) -> "SplineTrajectory":
        base = state if state is not None else KnotState.identity()
        return SplineTrajectory(order, knot_dt, t0, [base.copy() for _ in range(n_knots)])

    # -- time bookkeeping -------------------------------------------------

    @property
    def n_segments(self) -> int:
        return len(self.knots) - self.k + 1

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_segments * self.dt

    def knot_time(self, i: int) -> float:
        return self.t0 + i * self.dt

    def control_time(self, i: int) -> float:
        """Time where knot i has peak influence on the curve.

        With the segment-i <-> knots i..i+k-1 convention the curve lags
        the control polygon by (k-2)/2 knot intervals; sampling a target
        trajectory at control times makes the spline reproduce it up to
        the basis' polynomial degree (exactly, for linear motion).
        """
        return self.t0 + (i - (self.k - 2) / 2.0) * self.dt

    def normalized_time(self, t: float) -> tuple[int, float]:
        """Segment index and normalized time u in [0, 1) for t."""
        x = (t - self.t0) / self.dt
        i = int(np.floor(x))
        u = x - i
        if u > 1.0 - 1e-12:  # snap exact-boundary times hit by float fuzz
            i += 1
            u = 0.0
        if i < 0 or i >= self.n_segments:
            raise SplineRangeError(
                f"t={t} outside valid span [{self.t0}, {self.t_end})")
        return i, u

    def active_range(self, t_start: float, t_end: float) -> ActiveRange:
        """Knots [i, i+m+k-1] where segments i and i+m contain the bounds."""
        if t_end < t_start:
            raise SplineRangeError("empty interval")
        i, _ = self.normalized_time(t_start)
        j, _ = self.normalized_time(t_end)
        return ActiveRange(first=i, last=j + self.k - 1,
                           t_start=t_start, t_end=t_end)

    # -- evaluation --------------------------------------------------------

    def _uvecs(self, u: float):
        k = self.k
        up = np.array([u ** n for n in range(k)])
        du = np.array([0.0] + [n * u ** (n - 1) for n in range(1, k)]) / self.dt
        ddu = np.zeros(k)
        if k >= 3:
            ddu[2:] = [n * (n - 1) * u ** (n - 2) for n in range(2, k)]
        ddu /= self.dt * self.dt
        return up, du, ddu

    def _segment_knots(self, i: int):
        return self.knots[i:i + self.k]

    def eval_pose(self, t: float) -> tuple[Rotation, np.ndarray]:
        e = self.evaluate(t, need_jacobians=False, need_rates=False)
        return e.R, e.p

    def eval_derivatives(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(velocity, acceleration, body angular velocity) at t."""
        if self.k < 3:
            raise ValueError("acceleration requires spline order >= 3")
        e = self.evaluate(t, need_jacobians=False)
        return e.v, e.a, e.omega

    def eval_biases(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        e = self.evaluate(t, need_jacobians=False, need_rates=False)
        return e.b_a, e.b_g

    def evaluate(self, t: float, need_jacobians: bool = True,
                 need_rates: bool = True) -> SegmentEval:
        i, u = self.normalized_time(t)
        return self._evaluate_segment(i, u, need_jacobians, need_rates)

    def _evaluate_segment(self, i: int, u: float, need_jacobians: bool = True,
                          need_rates: bool = True) -> SegmentEval:
        """Core evaluation; u may be 1.0 here (used by continuity tests)."""
        k = self.k
        knots = self._segment_knots(i)
        up, du, ddu = self._uvecs(u)
        Mt = self.blend.Mtilde
        lam = Mt @ up            # lam[0] == 1 by construction
        dlam = Mt @ du
        ddlam = Mt @ ddu

        # cumulative weights -> per-knot scalar basis coefficients
        weight = np.empty(k)
        dweight = np.empty(k)
        ddweight = np.empty(k)
        for s in range(k):
            w = lam[s] - (lam[s + 1] if s + 1 < k else 0.0)
            dw = dlam[s] - (dlam[s + 1] if s + 1 < k else 0.0)
            ddw = ddlam[s] - (ddlam[s + 1] if s + 1 < k else 0.0)
            if s == 0:
                w, dw, ddw = 1.0 - lam[1], -dlam[1], -ddlam[1]
            weight[s], dweight[s], ddweight[s] = w, dw, ddw

        P = np.stack([kn.p for kn in knots])
        BA = np.stack([kn.b_a for kn in knots])
        BG = np.stack([kn.b_g for kn in knots])
        p = weight @ P
        v = dweight @ P
        a = ddweight @ P
        b_a = weight @ BA
        b_g = weight @ BG

        # rotation: deltas, axis-angle increments, partial products
        phis = [log_so3(knots[j - 1].R.inverse() * knots[j].R) for j in range(1, k)]
        A = [exp_so3(lam[j + 1] * phis[j]) for j in range(k - 1)]
        Pprod = [Rotation.identity()]
        for j in range(k - 1):
            Pprod.append(Pprod[-1] * A[j])
        R = knots[0].R * Pprod[-1]

        omega = np.zeros(3)
        vvecs = []  # v_j = P_{j-1} phi_j in the knot-0 frame
        for j in range(1, k):
            vj = Pprod[j - 1].rotate(phis[j - 1])
            vvecs.append(vj)
            omega += dlam[j] * vj
        omega = Pprod[-1].inverse().rotate(omega)

        out = SegmentEval(segment=i, u=u, R=R, p=p, v=v, a=a, omega=omega,
                          b_a=b_a, b_g=b_g, weight=weight, dweight=dweight,
                          ddweight=ddweight)
        if not need_rates:
            out.v = np.zeros(3)
            out.a = np.zeros(3)
        if need_jacobians:
            self._rotation_jacobians(out, knots, phis, A, Pprod, lam, dlam, vvecs)
        return out

    def _rotation_jacobians(self, out: SegmentEval, knots, phis, A, Pprod,
                            lam, dlam, vvecs) -> None:
        """Per-knot Jacobians of R(t) (left perturbation) and omega.

        For knot s, a perturbation R_s <- Exp(eta) R_s changes the delta
        increments phi_s (right-perturbed) and phi_{s+1} (left-perturbed);
        chaining through Exp with the SO(3) Jacobians and pushing every
        term to the left of the product gives E_s with
        R(t) <- Exp(E_s eta) R(t). The angular-velocity chain reuses the
        same dphi terms with prefix sums of dlam_j * skew(v_j).
        """
        k = self.k
        R0 = knots[0].R
        R0m = R0.matrix()
        Pm = [pr.matrix() for pr in Pprod]
        Pk = Pm[-1]

        # G_j = lam_j * Jl(lam_j phi_j); T_j = P_{j-1} G_j; prefix sums S_j
        G, T = [], []
        for j in range(1, k):
            Gj = lam[j] * left_jacobian(lam[j] * phis[j - 1])
            G.append(Gj)
            T.append(Pm[j - 1] @ Gj)
        Sprefix = []
        acc = np.zeros((3, 3))
        for j in range(1, k):
            acc = acc + dlam[j] * skew(vvecs[j - 1])
            Sprefix.append(acc.copy())

        # dphi_j / deta for the two knots touching delta j (eta in world frame)
        def dphi_right(j, s):  # knot s == j is the right element of d_j
            return right_jacobian_inv(phis[j - 1]) @ knots[s].R.matrix().T

        def dphi_left(j, s):  # knot s == j-1 is the left element of d_j
            return -left_jacobian_inv(phis[j - 1]) @ knots[s].R.matrix().T

        rot_jac = []
        omega_jac = []
        for s in range(k):
            E = np.eye(3).copy() if s == 0 else np.zeros((3, 3))
            W = np.zeros((3, 3))
            terms = []
            if s >= 1:
                terms.append((s, dphi_right(s, s)))
            if s + 1 <= k - 1:
                terms.append((s + 1, dphi_left(s + 1, s)))
            for j, dphi in terms:
                E = E + (R0m @ Pm[j - 1] @ G[j - 1]) @ dphi
                Wj = Sprefix[j - 1] @ T[j - 1] + dlam[j] * Pm[j - 1]
                W = W + (Pk.T @ Wj) @ dphi
            rot_jac.append(E)
            omega_jac.append(W)
        out.rot_jac = rot_jac
        out.omega_jac = omega_jac

    # -- mutation / io -----------------------------------------------------

    def append_knot(self, knot: KnotState) -> None:
        self.knots.append(knot)

    def apply_knot_update(self, index: int, dtheta, dp, dba, dbg) -> None:
        kn = self.knots[index]
        kn.R = exp_so3(dtheta) * kn.R
        kn.p = kn.p + np.asarray(dp, dtype=float)
        kn.b_a = kn.b_a + np.asarray(dba, dtype=float)
        kn.b_g = kn.b_g + np.asarray(dbg, dtype=float)

    def dump_knots(self, path) -> None:
        """One line per knot: t qw qx qy qz px py pz ba(3) bg(3)."""
        with open(path, "w") as f:
            f.write(f"# order={self.k} dt={self.dt!r} t0={self.t0!r}\n")
            for i, kn in enumerate(self.knots):
                vals = [self.knot_time(i), *kn.R.q, *kn.p, *kn.b_a, *kn.b_g]
                f.write(" ".join(f"{v:.12g}" for v in vals) + "\n")

    @staticmethod
    def load_knots(path) -> "SplineTrajectory":
        with open(path) as f:
            header = f.readline().strip()
            meta = dict(tok.split("=") for tok in header.lstrip("# ").split())
            knots = []
            t_first = None
            for line in f:
                vals = [float(x) for x in line.split()]
                if t_first is None:
                    t_first = vals[0]
                knots.append(KnotState(Rotation(vals[1:5]), np.array(vals[5:8]),
                                       np.array(vals[8:11]), np.array(vals[11:14])))
        return SplineTrajectory(int(meta["order"]), float(meta["dt"]),
                                float(meta["t0"]), knots)

"""IMU measurement model, forward propagation, and pre-integration.

Sign conventions (used consistently everywhere):
    - gravity is the physical down-pointing vector, g_w ~ (0, 0, -9.81);
    - measured specific force a_b = R^T (a_w - g_w) + b_a + noise;
    - measured rate omega_b = omega_true + b_g + noise;
    - corrections always subtract the bias from the measurement.

World kinematics then read a_w = R (a_b - b_a) + g_w, so a stationary,
bias-free sensor measures a_b = -R^T g_w and a free-falling one measures
zero.
"""

from dataclasses import dataclass, field

import numpy as np

from .lie import Rotation, exp_so3, log_so3, right_jacobian, skew

GRAVITY = 9.80665


def gravity_vector(magnitude: float = GRAVITY) -> np.ndarray:
    return np.array([0.0, 0.0, -magnitude])


@dataclass(frozen=True)
class ImuMeasurement:
    t: float
    a_b: np.ndarray
    w_b: np.ndarray


@dataclass(frozen=True)
class ImuNoiseModel:
    """Discrete per-sample stds for white noise, per-sqrt-second for walks."""

    sigma_a: float = 0.05
    sigma_g: float = 0.005
    sigma_ba: float = 0.005
    sigma_bg: float = 0.0005

    def __post_init__(self):
        for name in ("sigma_a", "sigma_g", "sigma_ba", "sigma_bg"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class NavState:
    t: float
    R: Rotation
    p: np.ndarray
    v: np.ndarray
    b_a: np.ndarray
    b_g: np.ndarray

    @staticmethod
    def initial(t: float = 0.0) -> "NavState":
        return NavState(t, Rotation.identity(), np.zeros(3), np.zeros(3),
                        np.zeros(3), np.zeros(3))

    def copy(self) -> "NavState":
        return NavState(self.t, Rotation(self.R.q), self.p.copy(), self.v.copy(),
                        self.b_a.copy(), self.b_g.copy())


@dataclass
class Preintegration:
    """Relative-motion summary of a burst in the frame of its start time.

    delta_p / delta_v / delta_q are gravity-free by construction. The
    bias Jacobians give the first-order change of the deltas when the
    integration biases move away from the reference (b_a, b_g):
    delta_q(b) ~= delta_q * Exp(J_q_bg (b_g - ref)).
    """

    delta_p: np.ndarray
    delta_v: np.ndarray
    delta_q: Rotation
    duration: float
    b_a: np.ndarray
    b_g: np.ndarray
    cov: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))
    J_p_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_p_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_v_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_v_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    J_q_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def corrected(self, b_a: np.ndarray, b_g: np.ndarray):
        """First-order re-linearized deltas at new biases."""
        dba = b_a - self.b_a
        dbg = b_g - self.b_g
        dp = self.delta_p + self.J_p_ba @ dba + self.J_p_bg @ dbg
        dv = self.delta_v + self.J_v_ba @ dba + self.J_v_bg @ dbg
        dq = self.delta_q * exp_so3(self.J_q_bg @ dbg)
        return dp, dv, dq


def _check_sequence(measurements) -> list:
    ms = list(measurements)
    if not ms:
        raise ValueError("empty measurement sequence")
    for a, b in zip(ms, ms[1:]):
        if b.t <= a.t:
            raise ValueError("measurement timestamps must be strictly increasing")
    return ms


def predict_world_accel(state: NavState, m: ImuMeasurement, g_w) -> np.ndarray:
    """World acceleration implied by the force equation at the state."""
    return state.R.rotate(m.a_b - state.b_a) + np.asarray(g_w, dtype=float)


def propagate(state: NavState, measurements, g_w) -> NavState:
    """Midpoint-rule strapdown integration across the measurement burst.

    Biases are held constant. Integration starts at the first timestamp
    (state.t is only advanced, never used to extrapolate backwards).
    """
    ms = _check_sequence(measurements)
    g_w = np.asarray(g_w, dtype=float)
    out = state.copy()
    R, p, v = out.R, out.p.copy(), out.v.copy()
    for m0, m1 in zip(ms, ms[1:]):
        dt = m1.t - m0.t
        w_mid = 0.5 * (m0.w_b + m1.w_b) - out.b_g
        R1 = R * exp_so3(w_mid * dt)
        a0 = R.rotate(m0.a_b - out.b_a) + g_w
        a1 = R1.rotate(m1.a_b - out.b_a) + g_w
        a_mid = 0.5 * (a0 + a1)
        p = p + v * dt + 0.5 * a_mid * dt * dt
        v = v + a_mid * dt
        R = R1
    out.R, out.p, out.v = R, p, v
    out.t = ms[-1].t
    return out


def preintegrate(measurements, b_a, b_g,
                 noise: ImuNoiseModel | None = None) -> Preintegration:
    """Gravity-free relative motion of a burst, in the start frame.

    Also accumulates the first-order bias Jacobians and, when a noise
    model is given, the 9x9 covariance of (delta_p, delta_v, dtheta).
    """
    ms = _check_sequence(measurements)
    b_a = np.asarray(b_a, dtype=float)
    b_g = np.asarray(b_g, dtype=float)
    dq = Rotation.identity()
    dp = np.zeros(3)
    dv = np.zeros(3)
    J_p_ba = np.zeros((3, 3))
    J_p_bg = np.zeros((3, 3))
    J_v_ba = np.zeros((3, 3))
    J_v_bg = np.zeros((3, 3))
    J_q_bg = np.zeros((3, 3))
    cov = np.zeros((9, 9))
    I3 = np.eye(3)
    for m0, m1 in zip(ms, ms[1:]):
        dt = m1.t - m0.t
        w_mid = 0.5 * (m0.w_b + m1.w_b) - b_g
        step = exp_so3(w_mid * dt)
        dq1 = dq * step
        a0 = dq.rotate(m0.a_b - b_a)
        a1 = dq1.rotate(m1.a_b - b_a)
        a_mid = 0.5 * (a0 + a1)

        Rk = dq.matrix()
        abar = 0.5 * (m0.a_b + m1.a_b) - b_a
        Ra = Rk @ skew(abar)
        Jr_step = right_jacobian(w_mid * dt)
        stepT = step.matrix().T

        if noise is not None:
            A = np.eye(9)
            A[0:3, 3:6] = I3 * dt
            A[0:3, 6:9] = -0.5 * Ra * dt * dt
            A[3:6, 6:9] = -Ra * dt
            A[6:9, 6:9] = stepT
            B = np.zeros((9, 6))
            B[0:3, 0:3] = 0.5 * Rk * dt * dt
            B[3:6, 0:3] = Rk * dt
            B[6:9, 3:6] = Jr_step * dt
            Q = np.diag([noise.sigma_a ** 2] * 3 + [noise.sigma_g ** 2] * 3)
            cov = A @ cov @ A.T + B @ Q @ B.T

        # bias Jacobians (same linearization as the covariance chain)
        J_p_ba = J_p_ba + J_v_ba * dt - 0.5 * Rk * dt * dt
        J_p_bg = J_p_bg + J_v_bg * dt - 0.5 * Ra @ J_q_bg * dt * dt
        J_v_ba = J_v_ba - Rk * dt
        J_v_bg = J_v_bg - Ra @ J_q_bg * dt
        J_q_bg = stepT @ J_q_bg - Jr_step * dt

        dp = dp + dv * dt + 0.5 * a_mid * dt * dt
        dv = dv + a_mid * dt
        dq = dq1

    return Preintegration(delta_p=dp, delta_v=dv, delta_q=dq,
                          duration=ms[-1].t - ms[0].t, b_a=b_a, b_g=b_g,
                          cov=cov, J_p_ba=J_p_ba, J_p_bg=J_p_bg,
                          J_v_ba=J_v_ba, J_v_bg=J_v_bg, J_q_bg=J_q_bg)


def compose_with_gravity(state: NavState, pre: Preintegration, g_w) -> NavState:
    """Apply a pre-integrated delta to a state, restoring gravity terms."""
    g_w = np.asarray(g_w, dtype=float)
    T = pre.duration
    out = state.copy()
    out.p = state.p + state.v * T + 0.5 * g_w * T * T + state.R.rotate(pre.delta_p)
    out.v = state.v + g_w * T + state.R.rotate(pre.delta_v)
    out.R = state.R * pre.delta_q
    out.t = state.t + T
    return out


def slice_measurements(measurements, t_start: float, t_end: float,
                       include_end: bool = True) -> list:
    """Measurements with t in [t_start, t_end] (or [t_start, t_end))."""
    eps = 1e-9
    if include_end:
        return [m for m in measurements if t_start - eps <= m.t <= t_end + eps]
    return [m for m in measurements if t_start - eps <= m.t < t_end - eps]


def load_imu_csv(path) -> list:
    """Read `t,ax,ay,az,gx,gy,gz` (SI units, header line required)."""
    out = []
    with open(path) as f:
        header = f.readline().strip()
        if header.replace(" ", "") != "t,ax,ay,az,gx,gy,gz":
            raise ValueError(f"unexpected IMU CSV header: {header!r}")
        for line in f:
            vals = [float(x) for x in line.split(",")]
            out.append(ImuMeasurement(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return out


def save_imu_csv(path, measurements) -> None:
    with open(path, "w") as f:
        f.write("t,ax,ay,az,gx,gy,gz\n")
        for m in measurements:
            vals = [m.t, *m.a_b, *m.w_b]
            f.write(",".join(f"{v:.9f}" for v in vals) + "\n")

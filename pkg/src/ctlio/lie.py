"""Minimal SO(3) / unit-quaternion algebra shared by all modules.

Conventions:
    - Quaternions are stored scalar-first [w, x, y, z] with the Hamilton
      product and a canonical sign w >= 0 after normalization.
    - Rotation objects map body vectors into the world frame:
      v_w = R.rotate(v_b) = R.matrix() @ v_b.
    - omega_matrix uses the vector-first quaternion layout [x, y, z, w]
      (the classic kinematics block form); see its docstring.
"""

import numpy as np

SMALL_ANGLE = 1e-6


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == np.cross(v, u)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def omega_matrix(w) -> np.ndarray:
    """4x4 quaternion-rate matrix for qdot = 0.5 * Omega(w) * q.

    Acts on quaternions laid out vector-first (x, y, z, w): the upper-left
    3x3 block is -skew(w), the last column is (w, 0) and the last row is
    (-w^T, 0). Use Rotation.as_xyzw() to get the matching vector form.
    """
    w = np.asarray(w, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = -skew(w)
    out[:3, 3] = w
    out[3, :3] = -w
    return out


class Rotation:
    """Unit quaternion wrapper with w >= 0 canonicalization."""

    __slots__ = ("q",)

    def __init__(self, q):
        self.q = np.asarray(q, dtype=float).copy()
        self._normalize()

    def _normalize(self):
        n = np.linalg.norm(self.q)
        if n < 1e-12:
            raise ValueError("degenerate quaternion with near-zero norm")
        self.q /= n
        if self.q[0] < 0.0:
            self.q = -self.q

    @staticmethod
    def identity() -> "Rotation":
        return Rotation([1.0, 0.0, 0.0, 0.0])

    @staticmethod
    def from_matrix(m) -> "Rotation":
        """Shepperd's method; the largest-diagonal branch keeps the
        trace-near-minus-one (180 degree) case well conditioned."""
        m = np.asarray(m, dtype=float)
        t = np.trace(m)
        if t > 0.0:
            s = np.sqrt(t + 1.0) * 2.0
            q = [0.25 * s,
                 (m[2, 1] - m[1, 2]) / s,
                 (m[0, 2] - m[2, 0]) / s,
                 (m[1, 0] - m[0, 1]) / s]
        else:
            i = int(np.argmax(np.diag(m)))
            if i == 0:
                s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
                q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                     (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
            elif i == 1:
                s = np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
                q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                     0.25 * s, (m[1, 2] + m[2, 1]) / s]
            else:
                s = np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
                q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                     (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        return Rotation(q)

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def as_xyzw(self) -> np.ndarray:
        """Vector-first component order used by omega_matrix."""
        w, x, y, z = self.q
        return np.array([x, y, z, w])

    @staticmethod
    def from_xyzw(v) -> "Rotation":
        x, y, z, w = np.asarray(v, dtype=float)
        return Rotation([w, x, y, z])

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation([w, -x, -y, -z])

    def __mul__(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])

    def rotate(self, v) -> np.ndarray:
        """Apply to a 3-vector or an (N, 3) stack of vectors."""
        v = np.asarray(v, dtype=float)
        w = self.q[0]
        u = self.q[1:]
        if v.ndim == 1:
            t = 2.0 * np.cross(u, v)
            return v + w * t + np.cross(u, t)
        t = 2.0 * np.cross(u[None, :], v)
        return v + w * t + np.cross(u[None, :], t)

    def angle_to(self, other: "Rotation") -> float:
        return float(np.linalg.norm(log_so3(self.inverse() * other)))

    def __repr__(self):
        return f"Rotation(q={self.q.tolist()})"


def exp_so3(phi) -> Rotation:
    """Exponential map: axis-angle (radians) to Rotation.

    Below SMALL_ANGLE the sin(t/2)/t factor uses its Taylor expansion.
    """
    phi = np.asarray(phi, dtype=float)
    t = np.linalg.norm(phi)
    half = 0.5 * t
    if t < SMALL_ANGLE:
        # sin(t/2)/t = 1/2 - t^2/48 + O(t^4)
        s = 0.5 - t * t / 48.0
        w = 1.0 - half * half / 2.0
    else:
        s = np.sin(half) / t
        w = np.cos(half)
    return Rotation([w, s * phi[0], s * phi[1], s * phi[2]])


def log_so3(r: Rotation) -> np.ndarray:
    """Logarithm map: Rotation to axis-angle with norm <= pi."""
    w = r.q[0]
    v = r.q[1:]
    s = np.linalg.norm(v)
    if s < 1e-9:
        # angle ~ 2s/w; first-order axis scaling
        return (2.0 / w) * v
    angle = 2.0 * np.arctan2(s, w)
    return (angle / s) * v


def _ab_coefficients(t: float):
    """Coefficients a = (1-cos t)/t^2 and b = (t - sin t)/t^3."""
    if t < 1e-4:
        t2 = t * t
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = (1.0 - np.cos(t)) / (t * t)
        b = (t - np.sin(t)) / (t * t * t)
    return a, b


def left_jacobian(phi) -> np.ndarray:
    """SO(3) left Jacobian: Exp(phi + d) ~= Exp(Jl(phi) d) Exp(phi)."""
    phi = np.asarray(phi, dtype=float)
    t = np.linalg.norm(phi)
    s = skew(phi)
    a, b = _ab_coefficients(t)
    return np.eye(3) + a * s + b * (s @ s)


def right_jacobian(phi) -> np.ndarray:
    """SO(3) right Jacobian: Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    t = np.linalg.norm(phi)
    s = skew(phi)
    a, b = _ab_coefficients(t)
    return np.eye(3) - a * s + b * (s @ s)


def _inv_c_coefficient(t: float):
    if t < 1e-4:
        t2 = t * t
        return 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    return (1.0 / (t * t)) - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t))


def left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    t = np.linalg.norm(phi)
    s = skew(phi)
    return np.eye(3) - 0.5 * s + _inv_c_coefficient(t) * (s @ s)


def right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    t = np.linalg.norm(phi)
    s = skew(phi)
    return np.eye(3) + 0.5 * s + _inv_c_coefficient(t) * (s @ s)

"""Motion-state recognition from raw and propagated IMU data.

Each knot-interval segment is labeled high-frequency (HFP) or
low-frequency (LFP) by the pooled RMSE of per-axis linear fits to the
accelerometer samples in the window: vibration that a low-order spline
cannot represent shows up as large linear-fit residuals. Constant
velocity instants (CVP) are local minima of the IMU-predicted world
acceleration norm below a threshold; they gate the gravity-alignment
factor.
"""

from dataclasses import dataclass

import numpy as np

HFP = "HFP"
LFP = "LFP"


@dataclass(frozen=True)
class MotionSegment:
    index: int
    t_start: float
    t_end: float
    label: str
    sigma_motion: float


@dataclass(frozen=True)
class CvpEvent:
    t: float
    accel_norm: float


def linear_fit_rmse(times, values) -> float:
    """Pooled RMSE of independent per-axis OLS linear fits.

    values is (N, 3); the residual sum of squares is pooled over all
    three axes before taking the root, giving a single sigma for the
    window.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    A = np.stack([np.ones_like(t), t - t[0]], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return float(np.sqrt(np.mean(resid ** 2)))


def classify_segment(index: int, t_start: float, t_end: float, measurements,
                     sigma_a: float, min_samples: int = 4) -> MotionSegment:
    """Label one segment HFP iff the linear-fit RMSE exceeds 3 sigma_a.

    Windows with fewer than min_samples accelerometer samples cannot
    support the fit and fall back to LFP with sigma_motion = 0.
    """
    in_win = [m for m in measurements if t_start - 1e-9 <= m.t < t_end - 1e-9]
    if len(in_win) < min_samples:
        return MotionSegment(index, t_start, t_end, LFP, 0.0)
    times = [m.t for m in in_win]
    acc = [m.a_b for m in in_win]
    sigma = linear_fit_rmse(times, acc)
    label = HFP if sigma > 3.0 * sigma_a else LFP
    return MotionSegment(index, t_start, t_end, label, sigma)


def classify_segments(t0: float, dt: float, n_segments: int, measurements,
                      sigma_a: float, index0: int = 0,
                      min_samples: int = 4) -> list:
    """Tile [t0, t0 + n*dt) into consecutive labeled segments."""
    return [classify_segment(index0 + i, t0 + i * dt, t0 + (i + 1) * dt,
                             measurements, sigma_a, min_samples)
            for i in range(n_segments)]


def detect_cvp(times, accel_norms, threshold: float = 0.3,
               refractory: float = 0.1) -> list:
    """Constant-velocity instants from a sampled world-accel-norm trace.

    Emits one event per (non-strict) local minimum below the threshold,
    then debounces: events closer than the refractory period to the
    previously emitted one are dropped.
    """
    t = np.asarray(times, dtype=float)
    n = np.asarray(accel_norms, dtype=float)
    events = []
    t_last = -np.inf
    for i in range(1, len(n) - 1):
        if n[i] >= threshold:
            continue
        if n[i] <= n[i - 1] and n[i] <= n[i + 1]:
            if t[i] - t_last >= refractory:
                events.append(CvpEvent(float(t[i]), float(n[i])))
                t_last = t[i]
    return events


def save_segments_csv(path, segments) -> None:
    """Debug dump: segment_index,label,sigma_motion."""
    with open(path, "w") as f:
        f.write("segment_index,label,sigma_motion\n")
        for s in segments:
            f.write(f"{s.index},{s.label},{s.sigma_motion:.9f}\n")

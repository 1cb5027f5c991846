"""Deterministic simulation: walking trajectories, plane worlds, sensors.

Ground truth is a fine cumulative B-spline fitted to an analytic motion
model: a smoothed waypoint path plus per-step vertical/longitudinal
vibration bursts (high-frequency content a coarse estimation spline
cannot represent) and low-frequency body bob whose zero crossings give
near-zero world acceleration instants. Segment labels and constant
velocity instants are derived from the spline's own noiseless signals,
so they are authoritative for classifier tests.

All randomness flows from named child streams of one seed, making every
output byte-reproducible.
"""

from dataclasses import dataclass, field

import numpy as np

from .bspline import KnotState, SplineTrajectory
from .imu import ImuMeasurement, ImuNoiseModel, gravity_vector
from .lie import Rotation, exp_so3
from .mapping import Scan
from .motion_state import CvpEvent, classify_segments, detect_cvp


# ---------------------------------------------------------------------------
# Worlds

@dataclass(frozen=True)
class Patch:
    """Bounded rectangle: center, unit normal, in-plane axes, half extents."""

    center: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_u: float
    half_v: float


def _rect(center, normal, u_axis, half_u, half_v) -> Patch:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    u = np.asarray(u_axis, dtype=float)
    u = u - (u @ n) * n
    u = u / np.linalg.norm(u)
    v = np.cross(n, u)
    return Patch(np.asarray(center, dtype=float), n, u, v, half_u, half_v)


@dataclass
class WorldModel:
    name: str
    patches: list
    waypoints: np.ndarray
    loop: bool
    eye_height: float = 1.7


def box_world(length=12.0, width=8.0, height=3.0) -> WorldModel:
    """Closed rectangular room; path loops around the interior."""
    lx, ly, h = length, width, height
    patches = [
        _rect([lx / 2, ly / 2, 0.0], [0, 0, 1], [1, 0, 0], lx / 2, ly / 2),
        _rect([lx / 2, ly / 2, h], [0, 0, -1], [1, 0, 0], lx / 2, ly / 2),
        _rect([0.0, ly / 2, h / 2], [1, 0, 0], [0, 1, 0], ly / 2, h / 2),
        _rect([lx, ly / 2, h / 2], [-1, 0, 0], [0, 1, 0], ly / 2, h / 2),
        _rect([lx / 2, 0.0, h / 2], [0, 1, 0], [1, 0, 0], lx / 2, h / 2),
        _rect([lx / 2, ly, h / 2], [0, -1, 0], [1, 0, 0], lx / 2, h / 2),
    ]
    margin = 2.0
    wps = np.array([[margin, margin], [lx - margin, margin],
                    [lx - margin, ly - margin], [margin, ly - margin]])
    return WorldModel("box", patches, wps, loop=True)


def corridor_world(length=80.0, width=3.0, height=3.0) -> WorldModel:
    """Two side walls plus floor and ceiling: plane normals span only two
    directions, leaving the along-corridor translation LiDAR-blind."""
    lx, w, h = length, width, height
    patches = [
        _rect([lx / 2, -w / 2, h / 2], [0, 1, 0], [1, 0, 0], lx / 2, h / 2),
        _rect([lx / 2, w / 2, h / 2], [0, -1, 0], [1, 0, 0], lx / 2, h / 2),
        _rect([lx / 2, 0.0, 0.0], [0, 0, 1], [1, 0, 0], lx / 2, w / 2),
        _rect([lx / 2, 0.0, h], [0, 0, -1], [1, 0, 0], lx / 2, w / 2),
    ]
    wps = np.array([[2.0, 0.0], [lx - 2.0, 0.0]])
    return WorldModel("corridor", patches, wps, loop=False)


def multiroom_world(room=8.0, height=3.0, gap=1.2) -> WorldModel:
    """Two rooms joined by a doorway; the path figure-eights through it."""
    r, h = room, height
    lx = 2 * r + 2.0
    patches = [
        _rect([lx / 2, r / 2, 0.0], [0, 0, 1], [1, 0, 0], lx / 2, r / 2),
        _rect([lx / 2, r / 2, h], [0, 0, -1], [1, 0, 0], lx / 2, r / 2),
        _rect([0.0, r / 2, h / 2], [1, 0, 0], [0, 1, 0], r / 2, h / 2),
        _rect([lx, r / 2, h / 2], [-1, 0, 0], [0, 1, 0], r / 2, h / 2),
        _rect([lx / 2, 0.0, h / 2], [0, 1, 0], [1, 0, 0], lx / 2, h / 2),
        _rect([lx / 2, r, h / 2], [0, -1, 0], [1, 0, 0], lx / 2, h / 2),
        # dividing wall with a doorway gap in the middle
        _rect([r + 1.0, (r - gap) / 4 + 0.0, h / 2], [1, 0, 0], [0, 1, 0],
              (r - gap) / 4, h / 2),
        _rect([r + 1.0, r - (r - gap) / 4, h / 2], [1, 0, 0], [0, 1, 0],
              (r - gap) / 4, h / 2),
    ]
    wps = np.array([[2.0, 2.0], [r - 1.0, r / 2], [r + 3.0, r / 2],
                    [2 * r, r - 2.0], [2 * r, 2.0], [r + 3.0, r / 2],
                    [r - 1.0, r / 2], [2.0, r - 2.0]])
    return WorldModel("multiroom", patches, wps, loop=True)


WORLD_PRESETS = {"box": box_world, "corridor": corridor_world,
                 "multiroom": multiroom_world}


# ---------------------------------------------------------------------------
# Motion profiles

@dataclass(frozen=True)
class MotionProfile:
    name: str
    speed: float
    step_frequency: float
    burst_accel: float
    burst_duration: float
    burst_frequency: float
    bob_amplitude: float
    wobble_amplitude: float = 0.02
    lead_in: float = 1.0
    ramp: float = 1.0
    vibration_scale: float = 1.0


def walk_profile(vibration_scale: float = 1.0) -> MotionProfile:
    return MotionProfile("walk", speed=1.5, step_frequency=2.0,
                         burst_accel=4.0, burst_duration=0.1,
                         burst_frequency=9.0, bob_amplitude=0.02,
                         vibration_scale=vibration_scale)


def run_profile(vibration_scale: float = 1.0) -> MotionProfile:
    return MotionProfile("run", speed=2.5, step_frequency=3.0,
                         burst_accel=9.0, burst_duration=0.15,
                         burst_frequency=11.0, bob_amplitude=0.03,
                         vibration_scale=vibration_scale)


def still_profile() -> MotionProfile:
    return MotionProfile("still", speed=0.0, step_frequency=2.0,
                         burst_accel=0.0, burst_duration=0.1,
                         burst_frequency=9.0, bob_amplitude=0.0,
                         vibration_scale=0.0)


MOTION_PRESETS = {"walk": walk_profile, "run": run_profile,
                  "still": lambda vibration_scale=1.0: still_profile()}


@dataclass
class GroundTruth:
    traj: SplineTrajectory
    duration: float
    g_w: np.ndarray
    segments: list = field(default_factory=list)
    cvp_events: list = field(default_factory=list)
    profile: str = ""

    def pose_at(self, t: float):
        return self.traj.eval_pose(t)


# ---------------------------------------------------------------------------
# Trajectory generation

def _polyline(waypoints: np.ndarray, loop: bool):
    pts = np.asarray(waypoints, dtype=float)
    if loop:
        pts = np.vstack([pts, pts[0]])
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]

    def at(s: float) -> np.ndarray:
        if loop:
            s = s % total
        else:
            # out-and-back on an open path
            lap, rem = divmod(s, total)
            s = rem if int(lap) % 2 == 0 else total - rem
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(max(i, 0), len(seg) - 1)
        f = (s - cum[i]) / max(seg_len[i], 1e-12)
        return pts[i] + f * seg[i]

    return at, total


def _smooth(x: np.ndarray, width: int, passes: int = 2) -> np.ndarray:
    if width <= 1:
        return x
    kernel = np.ones(width) / width
    out = x.copy()
    for _ in range(passes):
        pad = np.concatenate([np.repeat(out[:1], width, axis=0), out,
                              np.repeat(out[-1:], width, axis=0)])
        sm = np.empty_like(out)
        for c in range(out.shape[1]):
            sm[:, c] = np.convolve(pad[:, c], kernel, mode="same")[width:-width]
        out = sm
    return out


def generate_trajectory(profile: MotionProfile, world: WorldModel,
                        duration: float, seed: int = 0,
                        noise: ImuNoiseModel | None = None,
                        knot_dt: float = 0.05,
                        fine_dt: float = 0.01) -> GroundTruth:
    """Fine ground-truth spline plus authoritative labels and CVP marks.

    The motion model is analytic, so the seed is unused today; it stays
    in the signature so profiles can grow randomized variation without
    touching call sites.
    """
    noise = noise or ImuNoiseModel()
    g_w = gravity_vector()
    path_at, _ = _polyline(world.waypoints, world.loop)
    margin = 0.6
    n_knots = int(np.ceil((duration + margin) / fine_dt)) + 8

    probe = SplineTrajectory.constant(4, fine_dt, 0.0, 8)
    tk = np.array([probe.control_time(j) for j in range(n_knots)])
    tk = np.maximum(tk, 0.0)

    # arclength progress with a smooth speed ramp after the lead-in
    def speed_at(t):
        if t < profile.lead_in or profile.speed == 0.0:
            return 0.0
        x = min((t - profile.lead_in) / max(profile.ramp, 1e-9), 1.0)
        return profile.speed * 0.5 * (1.0 - np.cos(np.pi * x))

    t_grid = np.arange(0.0, duration + margin + fine_dt, fine_dt / 4.0)
    v_grid = np.array([speed_at(t) for t in t_grid])
    s_grid = np.concatenate([[0.0], np.cumsum(0.5 * (v_grid[1:] + v_grid[:-1])
                                              * np.diff(t_grid))])
    s_at = lambda t: float(np.interp(t, t_grid, s_grid))

    base = np.array([path_at(s_at(t)) for t in tk])
    base = _smooth(base, width=max(int(0.4 / fine_dt), 1))
    z0 = world.eye_height

    # heading from the smoothed planar path, held through standstill
    d = np.gradient(base, axis=0)
    yaw = np.zeros(len(tk))
    last = 0.0
    for j in range(len(tk)):
        if np.linalg.norm(d[j]) > 1e-6:
            last = np.arctan2(d[j, 1], d[j, 0])
        yaw[j] = last
    yaw = np.unwrap(yaw)

    fs = profile.step_frequency
    vib = profile.vibration_scale
    burst_amp = profile.burst_accel * vib
    disp_amp = burst_amp / (2.0 * np.pi * profile.burst_frequency) ** 2

    knots = []
    for j, t in enumerate(tk):
        gait = speed_at(t) / profile.speed if profile.speed > 0.0 else 0.0
        p = np.array([base[j, 0], base[j, 1], z0])
        roll = pitch = 0.0
        if gait > 0.0:
            # every gait term fades in with the speed ramp; a hard onset
            # would put a velocity step (huge accel spike) into the spline
            tau_w = t - profile.lead_in
            p[2] += gait * profile.bob_amplitude * np.sin(2 * np.pi * fs * tau_w)
            # step-phase vibration burst, raised-cosine envelope
            phase = tau_w * fs
            tau_b = (phase - np.floor(phase)) / fs
            if tau_b < profile.burst_duration and vib > 0.0:
                env = np.sin(np.pi * tau_b / profile.burst_duration) ** 2
                osc = np.sin(2 * np.pi * profile.burst_frequency * tau_b)
                direction = np.array([0.4 * np.cos(yaw[j]),
                                      0.4 * np.sin(yaw[j]), 1.0])
                direction /= np.linalg.norm(direction)
                p += gait * disp_amp * env * osc * direction
            roll = gait * profile.wobble_amplitude * np.sin(2 * np.pi * fs * tau_w)
            pitch = gait * profile.wobble_amplitude * np.sin(
                2 * np.pi * fs * tau_w + 1.3)
        R = (exp_so3([0.0, 0.0, yaw[j]]) * exp_so3([0.0, pitch, 0.0])
             * exp_so3([roll, 0.0, 0.0]))
        knots.append(KnotState(R, p, np.zeros(3), np.zeros(3)))

    traj = SplineTrajectory(4, fine_dt, 0.0, knots)
    gt = GroundTruth(traj=traj, duration=duration, g_w=g_w,
                     profile=profile.name)

    # authoritative labels from the noiseless body-frame accelerometer
    rate = 200.0
    clean = simulate_imu(gt, ImuNoiseModel(0.0, 0.0, 0.0, 0.0), rate=rate,
                         seed=0)[0]
    n_seg = int(np.floor(duration / knot_dt))
    gt.segments = classify_segments(0.0, knot_dt, n_seg, clean,
                                    sigma_a=noise.sigma_a)

    # CVP marks from the spline's own world-acceleration norm
    grid = np.arange(0.0, duration, 1e-3)
    norms = np.empty(len(grid))
    for i, t in enumerate(grid):
        _, a, _ = traj.eval_derivatives(t)
        norms[i] = np.linalg.norm(a)
    gt.cvp_events = detect_cvp(grid, norms, threshold=0.05, refractory=0.1)
    return gt


# ---------------------------------------------------------------------------
# Sensor simulation

def simulate_imu(gt: GroundTruth, noise: ImuNoiseModel, rate: float = 200.0,
                 seed: int = 0, duration: float | None = None):
    """Noisy IMU stream plus the true bias traces (for diagnostics)."""
    if rate < 100.0:
        raise ValueError("IMU rate must be >= 100 Hz")
    duration = gt.duration if duration is None else duration
    dt = 1.0 / rate
    n = int(np.floor(duration / dt)) + 1
    root = np.random.SeedSequence(entropy=seed, spawn_key=(101,))
    s_acc, s_gyr, s_ba, s_bg = [np.random.default_rng(s)
                                for s in root.spawn(4)]
    b_a = np.zeros(3)
    b_g = np.zeros(3)
    sq = np.sqrt(dt)
    out = []
    biases = np.zeros((n, 6))
    for i in range(n):
        t = i * dt
        ev = gt.traj.evaluate(min(t, gt.traj.t_end - 1e-9),
                              need_jacobians=False)
        a_b = ev.R.matrix().T @ (ev.a - gt.g_w)
        w_b = ev.omega
        a_m = a_b + b_a + s_acc.normal(size=3) * noise.sigma_a
        w_m = w_b + b_g + s_gyr.normal(size=3) * noise.sigma_g
        out.append(ImuMeasurement(t, a_m, w_m))
        biases[i, :3] = b_a
        biases[i, 3:] = b_g
        b_a = b_a + s_ba.normal(size=3) * noise.sigma_ba * sq
        b_g = b_g + s_bg.normal(size=3) * noise.sigma_bg * sq
    return out, biases


def scan_directions(n_points: int, elevation_deg: float = 38.0) -> np.ndarray:
    """Fixed non-repetitive rosette over a full azimuth circle."""
    i = np.arange(n_points)
    az = 2.0 * np.pi * ((i * 0.61803398875) % 1.0)
    el = np.deg2rad(elevation_deg) * np.sin(2.0 * np.pi * ((i * 0.2137) % 1.0))
    return np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                            np.sin(el)])


def _cast_rays(origin: np.ndarray, dirs_w: np.ndarray, patches,
               min_range: float, max_range: float) -> np.ndarray:
    """Ranges for each ray; inf for misses."""
    n = len(dirs_w)
    best = np.full(n, np.inf)
    for p in patches:
        denom = dirs_w @ p.normal
        valid = np.abs(denom) > 1e-9
        tt = np.where(valid,
                      ((p.center - origin) @ p.normal) / np.where(valid, denom, 1.0),
                      np.inf)
        with np.errstate(invalid="ignore"):
            q = origin[None, :] + tt[:, None] * dirs_w
        rel = q - p.center
        inside = (np.abs(rel @ p.u_axis) <= p.half_u) & \
                 (np.abs(rel @ p.v_axis) <= p.half_v)
        ok = valid & inside & (tt > min_range) & (tt < max_range) & (tt < best)
        best[ok] = tt[ok]
    return best


def simulate_scan(gt: GroundTruth, world: WorldModel, t_start: float,
                  period: float = 0.1, n_points: int = 2000,
                  range_sigma: float = 0.03, seed: int = 0,
                  min_range: float = 0.1, max_range: float = 40.0,
                  pose_bin: float = 0.001) -> Scan:
    """One sweep with linearly spread per-point timestamps.

    Hit points are perturbed along the ray; misses are dropped. Sensor
    poses are quantized to pose_bin (sub-mm error at walking speed).
    """
    dirs_s = scan_directions(n_points)
    offsets = period * np.arange(n_points) / n_points
    times = t_start + offsets
    if pose_bin > 0.0:
        q_times = np.round(times / pose_bin) * pose_bin
    else:
        q_times = times
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed,
                               spawn_key=(202, int(round(t_start * 1e6)))))
    pts = []
    offs = []
    order = np.argsort(q_times, kind="stable")
    start = 0
    while start < n_points:
        stop = start
        t_q = q_times[order[start]]
        while stop < n_points and q_times[order[stop]] == t_q:
            stop += 1
        sel = order[start:stop]
        R, p = gt.traj.eval_pose(min(t_q, gt.traj.t_end - 1e-9))
        d_w = R.rotate(dirs_s[sel])
        rr = _cast_rays(p, d_w, world.patches, min_range, max_range)
        hit = np.isfinite(rr)
        if np.any(hit):
            noisy_r = rr[hit] + rng.normal(size=int(np.sum(hit))) * range_sigma
            pts.append(dirs_s[sel[hit]] * noisy_r[:, None])
            offs.append(offsets[sel[hit]])
        start = stop
    if not pts:
        return Scan(t_start=t_start, period=period,
                    points=np.zeros((0, 3)), offsets=np.zeros(0))
    points = np.vstack(pts)
    offsets_out = np.concatenate(offs)
    order2 = np.argsort(offsets_out, kind="stable")
    return Scan(t_start=t_start, period=period, points=points[order2],
                offsets=offsets_out[order2])

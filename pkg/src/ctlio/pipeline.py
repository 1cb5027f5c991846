"""Per-frame odometry: the full estimation loop over sliding windows.

Each LiDAR frame triggers the same sequence: extend the trajectory with
propagation-seeded knots, classify the new segments, run an IMU-only
solve for the initial guess, deskew the scan, associate against the
local map, select correspondences by the min-eigenvalue criterion, solve
the full window, update the keyframe map, and marginalize the knots that
leave the window.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .bspline import KnotState, SplineTrajectory
from .factors import (
    BiasWalkFactor,
    LidarBundleFactor,
    MarginalPrior,
)
from .imu import (
    ImuNoiseModel,
    NavState,
    gravity_vector,
    predict_world_accel,
    propagate,
    slice_measurements,
)
from .lie import Rotation, exp_so3
from .mapping import (
    AssociationConfig,
    KeyframeConfig,
    LocalMap,
    Scan,
    associate_batch,
    deskew,
    maybe_insert_keyframe,
)
from .motion_state import classify_segments, detect_cvp
from .selection import (
    SelectionConfig,
    greedy_select,
    group_by_voxel,
    group_select,
    lazy_counting_voxel_size,
    normalize_jacobians,
    stochastic_greedy_select,
)
from .solver import (
    SolverConfig,
    WindowProblem,
    bias_walk_covariance,
    build_and_solve,
    build_imu_factors,
    slide_and_marginalize,
)


@dataclass
class PipelineConfig:
    order: int = 4
    knot_dt: float = 0.05
    frame_period: float = 0.1
    gravity: float = 9.80665
    noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)
    cvp_threshold: float = 0.3
    cvp_refractory: float = 0.1
    sigma_cv: float = 0.0
    sigma_lidar: float = 0.03
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    selection_enabled: bool = True
    selection_solver: str = "group"   # group | stochastic | greedy
    association: AssociationConfig = field(default_factory=AssociationConfig)
    keyframe: KeyframeConfig = field(default_factory=KeyframeConfig)
    map_voxel: float = 0.2
    solver: SolverConfig = field(default_factory=SolverConfig)
    bias_walk_factors: bool = True
    pose_time_bin: float = 0.005
    min_correspondences: int = 50
    use_hybrid: bool = True
    use_cvp: bool = True
    seed: int = 0
    startup_sigma_rot: float = 1e-4
    startup_sigma_pos: float = 1e-4
    startup_sigma_ba: float = 0.05
    startup_sigma_bg: float = 0.01


@dataclass
class FrameResult:
    index: int
    t: float
    R: Rotation
    p: np.ndarray
    n_points: int = 0
    n_correspondences: int = 0
    n_selected: int = 0
    degraded: bool = False
    keyframe: bool = False
    timings: dict = field(default_factory=dict)
    init_report: object = None
    solve_report: object = None


class OdometryPipeline:
    def __init__(self, cfg: PipelineConfig):
        m = cfg.frame_period / cfg.knot_dt
        if abs(m - round(m)) > 1e-9 or round(m) < 1:
            raise ValueError("frame_period must be a positive multiple of knot_dt")
        self.cfg = cfg
        self.m = int(round(m))
        self.g_w = gravity_vector(cfg.gravity)
        k = cfg.order
        n0 = k + self.m
        self.traj = SplineTrajectory.constant(k, cfg.knot_dt, 0.0, n0)
        self.local_map = LocalMap(voxel_size=cfg.map_voxel)
        self.frame_index = 0
        self.prior = self._startup_prior()
        self.live_factors = []
        if cfg.bias_walk_factors:
            cov = bias_walk_covariance(cfg.noise, cfg.knot_dt)
            for j in range(1, n0):
                self.live_factors.append(BiasWalkFactor(j - 1, j, cov))
        self._lcs_voxel = None
        self._lcs_group_count = None
        self.segments = []
        self.cvp_events = []

    def _startup_prior(self) -> MarginalPrior:
        cfg = self.cfg
        k = cfg.order
        idx = list(range(k - 1))
        per = np.concatenate([
            np.full(3, 1.0 / cfg.startup_sigma_rot ** 2),
            np.full(3, 1.0 / cfg.startup_sigma_pos ** 2),
            np.full(3, 1.0 / cfg.startup_sigma_ba ** 2),
            np.full(3, 1.0 / cfg.startup_sigma_bg ** 2),
        ])
        H = np.diag(np.tile(per, len(idx)))
        return MarginalPrior.from_information(
            idx, [self.traj.knots[i].copy() for i in idx], H)

    # -- knot management ----------------------------------------------------

    def _extend_knots(self, needed_last: int, t_start: float,
                      imu_burst) -> None:
        """Append propagation-seeded knots up to the given index.

        The anchor is the frame start: its boundary evaluation carries
        zero weight on the still-unconstrained trailing knot, so seeding
        never feeds extrapolation error back through the spline (which
        would compound geometrically frame over frame). From the anchor
        the IMU burst is propagated once, then each new knot takes a
        constant-rate extrapolation to its control time.
        """
        traj = self.traj
        if len(traj.knots) > needed_last:
            return
        ev = traj.evaluate(t_start, need_jacobians=False)
        state = NavState(t_start, ev.R, ev.p, ev.v, ev.b_a, ev.b_g)
        burst = [m for m in imu_burst if m.t >= t_start]
        if len(burst) >= 2:
            omega_end = burst[-1].w_b - state.b_g
            state = propagate(state, burst, self.g_w)
        else:
            omega_end = ev.omega
        while len(traj.knots) <= needed_last:
            j = len(traj.knots)
            dt = traj.control_time(j) - state.t
            R_new = state.R * exp_so3(omega_end * dt)
            p_new = state.p + state.v * dt
            traj.append_knot(KnotState(R_new, p_new, state.b_a.copy(),
                                       state.b_g.copy()))
            if self.cfg.bias_walk_factors:
                cov = bias_walk_covariance(self.cfg.noise, self.cfg.knot_dt)
                self.live_factors.append(BiasWalkFactor(j - 1, j, cov))

    # -- per-frame stages ---------------------------------------------------

    def _detect_cvp_events(self, t0: float, imu_burst) -> list:
        ev0 = self.traj.evaluate(t0, need_jacobians=False)
        state = NavState(t0, ev0.R, ev0.p, ev0.v, ev0.b_a, ev0.b_g)
        times, norms = [], []
        cur = state
        for a, b in zip(imu_burst, imu_burst[1:]):
            cur = propagate(cur, [a, b], self.g_w)
            times.append(b.t)
            norms.append(np.linalg.norm(predict_world_accel(cur, b, self.g_w)))
        return detect_cvp(times, norms, self.cfg.cvp_threshold,
                          self.cfg.cvp_refractory)

    def _information_rows(self, corrs) -> np.ndarray:
        """Center-knot 1x6 rows, one batched pass per pose-time bin."""
        rows = np.empty((len(corrs), 6))
        order = np.argsort([c.t for c in corrs], kind="stable")
        start = 0
        while start < len(order):
            t = corrs[order[start]].t
            stop = start
            while stop < len(order) and corrs[order[stop]].t == t:
                stop += 1
            sel = order[start:stop]
            ev = self.traj.evaluate(t)
            s = int(np.argmax(ev.weight))
            E = ev.rot_jac[s]
            F = np.stack([corrs[i].point for i in sel])
            N = np.stack([corrs[i].n for i in sel])
            C = np.cross(N, ev.R.rotate(F))
            rows[sel, :3] = -C @ E
            rows[sel, 3:] = ev.weight[s] * N
            for i in sel:
                corrs[i].center_knot = ev.segment + s
                corrs[i].info_row = rows[i]
            start = stop
        return rows

    def _select(self, corrs, rows) -> list:
        cfg = self.cfg
        sel_cfg = cfg.selection
        if not cfg.selection_enabled or len(corrs) <= sel_cfg.n_target:
            return list(range(len(corrs)))
        seed = cfg.seed + self.frame_index
        if cfg.selection_solver == "greedy":
            return greedy_select(rows, sel_cfg.n_target).indices
        if cfg.selection_solver == "stochastic":
            return stochastic_greedy_select(rows, sel_cfg.n_target,
                                            sel_cfg.epsilon, seed).indices
        normed, _, _ = normalize_jacobians(rows)
        voxel = lazy_counting_voxel_size(normed, sel_cfg, self._lcs_voxel,
                                         self._lcs_group_count)
        res = group_select(rows, sel_cfg, seed=seed, voxel_size=voxel,
                           normalized_rows=normed)
        self._lcs_voxel = voxel
        self._lcs_group_count = res.diagnostics.get("n_groups")
        return res.indices

    def _lidar_factors(self, corrs, selected) -> list:
        groups = {}
        for i in selected:
            groups.setdefault(corrs[i].t, []).append(i)
        out = []
        for t in sorted(groups):
            idxs = groups[t]
            out.append(LidarBundleFactor(
                t=t,
                points=np.stack([corrs[i].point for i in idxs]),
                normals=np.stack([corrs[i].n for i in idxs]),
                mus=np.stack([corrs[i].mu for i in idxs]),
                sigma=self.cfg.sigma_lidar))
        return out

    def process_frame(self, scan: Scan, imu_burst) -> FrameResult:
        cfg = self.cfg
        t_total = time.perf_counter()
        f = self.frame_index
        i0 = f * self.m
        t0 = i0 * cfg.knot_dt
        t1 = t0 + cfg.frame_period
        active_last = i0 + self.m + cfg.order - 1
        timings = {}

        t_mark = time.perf_counter()
        self._extend_knots(active_last, t0, imu_burst)
        active = self.traj.active_range(t0, t1)

        burst = slice_measurements(imu_burst, t0, t1)
        segments = classify_segments(t0, cfg.knot_dt, self.m, burst,
                                     sigma_a=cfg.noise.sigma_a)
        self.segments.extend(segments)
        cvp = self._detect_cvp_events(t0, burst) if cfg.use_cvp else []
        self.cvp_events.extend(cvp)

        imu_factors = build_imu_factors(self.traj, burst, segments, cvp,
                                        self.g_w, cfg.noise, cfg.sigma_cv,
                                        cfg.use_hybrid)
        init_problem = WindowProblem(self.traj, active,
                                     imu_factors + self.live_factors,
                                     prior=self.prior)
        init_report = build_and_solve(init_problem, cfg.solver)
        timings["imu_init"] = time.perf_counter() - t_mark

        t_mark = time.perf_counter()
        world_pts = deskew(scan, self.traj, time_bin=cfg.pose_time_bin)
        times = scan.times()
        if cfg.pose_time_bin > 0.0:
            times = np.round(times / cfg.pose_time_bin) * cfg.pose_time_bin
        times = np.clip(times, self.traj.t0,
                        np.nextafter(self.traj.t_end, -np.inf))
        timings["deskew"] = time.perf_counter() - t_mark

        t_mark = time.perf_counter()
        corrs = []
        if len(self.local_map) >= cfg.association.knn:
            origins = np.empty_like(world_pts)
            for t in np.unique(times):
                _, p = self.traj.eval_pose(t)
                origins[times == t] = p
            corrs = associate_batch(world_pts, scan.points, times,
                                    self.local_map, origins, cfg.association)
        timings["associate"] = time.perf_counter() - t_mark

        degraded = (self.local_map.insertions > 0
                    and len(corrs) < cfg.min_correspondences)
        solve_report = init_report
        n_selected = 0
        t_mark = time.perf_counter()
        if corrs and not degraded:
            rows = self._information_rows(corrs)
            selected = self._select(corrs, rows)
            n_selected = len(selected)
            timings["select"] = time.perf_counter() - t_mark
            t_mark = time.perf_counter()
            factors = (imu_factors + self.live_factors
                       + self._lidar_factors(corrs, selected))
            problem = WindowProblem(self.traj, active, factors,
                                    prior=self.prior)
            solve_report = build_and_solve(problem, cfg.solver)
            timings["solve"] = time.perf_counter() - t_mark
        else:
            timings["select"] = 0.0
            timings["solve"] = 0.0
            problem = init_problem

        t_mark = time.perf_counter()
        R_out, p_out = self.traj.eval_pose(t1)
        is_kf = False
        if not degraded:
            redeskewed = deskew(scan, self.traj, time_bin=cfg.pose_time_bin)
            is_kf = maybe_insert_keyframe(self.local_map, redeskewed, t1,
                                          R_out, p_out, cfg.keyframe)
        timings["map"] = time.perf_counter() - t_mark

        t_mark = time.perf_counter()
        self.prior, surviving = slide_and_marginalize(problem, i0 + self.m,
                                                      cfg.solver)
        self.live_factors = [fa for fa in surviving
                             if isinstance(fa, BiasWalkFactor)]
        timings["slide"] = time.perf_counter() - t_mark
        timings["total"] = time.perf_counter() - t_total

        self.frame_index += 1
        return FrameResult(index=f, t=t1, R=R_out, p=p_out,
                           n_points=len(scan),
                           n_correspondences=len(corrs),
                           n_selected=n_selected, degraded=degraded,
                           keyframe=is_kf, timings=timings,
                           init_report=init_report,
                           solve_report=solve_report)


def run_odometry(cfg: PipelineConfig, scans, measurements,
                 progress=None) -> list:
    """Process a whole dataset; returns the per-frame results."""
    pipe = OdometryPipeline(cfg)
    results = []
    for scan in scans:
        t0, t1 = scan.t_start, scan.t_start + scan.period
        burst = slice_measurements(measurements, t0 - 0.01, t1 + 0.01)
        results.append(pipe.process_frame(scan, burst))
        if progress is not None:
            progress(results[-1])
    return results

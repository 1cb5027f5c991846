"""Sliding-window MAP solver over active spline knots.

The window problem stacks whitened residuals of all factor families over
the active knots (each knot a 12-D local block) and minimizes the
robustified squared norm with damped Gauss-Newton: multiplicative
Levenberg damping, steps applied through the local retraction
(Exp(dtheta) on rotations, additive elsewhere), rejected steps rolled
back. Knots leaving the window are folded into a Gaussian prior by Schur
complement over the information of every factor touching them.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .bspline import ActiveRange, SplineTrajectory
from .factors import (
    KNOT_DOF,
    BiasWalkFactor,
    CvpFactor,
    EvalCache,
    HfpFactor,
    LfpFactor,
    MarginalPrior,
    PriorFactor,
)
from .imu import ImuNoiseModel, preintegrate, slice_measurements
from .motion_state import HFP


@dataclass
class SolverConfig:
    max_iterations: int = 10
    damping_init: float = 1e-4
    damping_factor: float = 10.0
    damping_max: float = 1e10
    cost_rel_tol: float = 1e-6
    step_tol: float = 1e-8
    huber_delta: float = 0.1


@dataclass
class WindowProblem:
    traj: SplineTrajectory
    active: ActiveRange
    factors: list
    prior: MarginalPrior | None = None

    def all_factors(self) -> list:
        out = list(self.factors)
        if self.prior is not None and self.prior.dimension() > 0:
            out.append(PriorFactor(self.prior))
        return out


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    family_costs: dict = field(default_factory=dict)
    wall_time: float = 0.0
    cost_trace: list = field(default_factory=list)


def _whitener(cov: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of a covariance."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 2 and np.count_nonzero(cov - np.diag(np.diagonal(cov))) == 0:
        return np.diag(1.0 / np.sqrt(np.maximum(np.diagonal(cov), 1e-300)))
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.maximum(w, 1e-300)
    return (V / np.sqrt(w)) @ V.T


def _huber_cost_and_weights(r: np.ndarray, delta: float):
    """True Huber cost per element and IRLS weights for the GN system."""
    a = np.abs(r)
    quad = a <= delta
    cost = np.where(quad, r * r, 2.0 * delta * a - delta * delta)
    weights = np.where(quad, 1.0, delta / np.maximum(a, 1e-300))
    return float(np.sum(cost)), weights


class _Assembly:
    """One linearization pass: cost, gradient, Gauss-Newton Hessian."""

    def __init__(self, problem: WindowProblem, cfg: SolverConfig,
                 whiteners: dict, with_system: bool = True):
        active = list(problem.active.indices())
        slot = {idx: i for i, idx in enumerate(active)}
        n = len(active) * KNOT_DOF
        H = np.zeros((n, n)) if with_system else None
        g = np.zeros(n) if with_system else None
        cost = 0.0
        family_costs: dict = {}
        cache = EvalCache(problem.traj)
        for f in problem.all_factors():
            fr = f.evaluate(problem.traj, cache)
            key = id(f)
            L = whiteners.get(key)
            if L is None:
                L = _whitener(fr.cov)
                whiteners[key] = L
            r = L @ fr.r
            if f.family == "lidar":
                # robust loss on the raw (pre-whitening) scalar residuals
                fc, w = _huber_cost_and_weights(fr.r, cfg.huber_delta)
                sigma2 = fr.cov[0, 0]
                fc = fc / sigma2
                sw = np.sqrt(w)
                r = sw * r
            else:
                fc = float(r @ r)
                sw = None
            cost += fc
            family_costs[f.family] = family_costs.get(f.family, 0.0) + fc
            if not with_system:
                continue
            blocks = {}
            for idx, J in fr.jac.items():
                # structural zeros (e.g. the trailing stencil knot of a
                # boundary evaluation) must stay exactly zero, or the
                # damped solve amplifies their float dust into garbage
                # updates for otherwise-unconstrained knots
                if np.max(np.abs(J)) < 1e-12:
                    continue
                Jw = L @ J
                if sw is not None:
                    Jw = sw[:, None] * Jw
                blocks[idx] = Jw
            for idx, Jw in blocks.items():
                if idx not in slot:
                    raise ValueError(
                        f"factor touches knot {idx} outside the active range")
                si = slot[idx] * KNOT_DOF
                g[si:si + KNOT_DOF] += Jw.T @ r
                for jdx, Jw2 in blocks.items():
                    sj = slot[jdx] * KNOT_DOF
                    H[si:si + KNOT_DOF, sj:sj + KNOT_DOF] += Jw.T @ Jw2
        self.H = H
        self.g = g
        self.cost = cost
        self.family_costs = family_costs
        self.active = active


def evaluate_cost(problem: WindowProblem, cfg: SolverConfig,
                  whiteners: dict) -> float:
    return _Assembly(problem, cfg, whiteners, with_system=False).cost


def build_and_solve(problem: WindowProblem,
                    cfg: SolverConfig = SolverConfig()) -> SolveReport:
    """Damped Gauss-Newton until the cost or step stalls.

    Rejected steps restore the knots and raise the damping tenfold;
    accepted steps lower it. The report's cost trace lists the cost after
    every accepted iteration.
    """
    t_start = time.perf_counter()
    traj = problem.traj
    whiteners: dict = {}
    asm = _Assembly(problem, cfg, whiteners)
    initial_cost = asm.cost
    cost = initial_cost
    trace = [cost]
    mu = cfg.damping_init
    iterations = 0
    termination = "max_iterations"
    while iterations < cfg.max_iterations:
        stepped = False
        while mu <= cfg.damping_max:
            Hd = asm.H + mu * np.eye(asm.H.shape[0])
            try:
                delta = np.linalg.solve(Hd, -asm.g)
            except np.linalg.LinAlgError:
                mu *= cfg.damping_factor
                continue
            backup = [traj.knots[i].copy() for i in asm.active]
            for slot_i, idx in enumerate(asm.active):
                d = delta[slot_i * KNOT_DOF:(slot_i + 1) * KNOT_DOF]
                traj.apply_knot_update(idx, d[0:3], d[3:6], d[6:9], d[9:12])
            new_cost = evaluate_cost(problem, cfg, whiteners)
            if new_cost <= cost + 1e-15:
                mu = max(mu / cfg.damping_factor, 1e-9)
                stepped = True
                break
            for idx, kn in zip(asm.active, backup):
                traj.knots[idx] = kn
            mu *= cfg.damping_factor
        if not stepped:
            termination = "damping_exhausted"
            break
        iterations += 1
        step_norm = float(np.linalg.norm(delta))
        rel_drop = (cost - new_cost) / max(cost, 1e-300)
        cost = new_cost
        trace.append(cost)
        if rel_drop < cfg.cost_rel_tol:
            termination = "converged_cost"
            break
        if step_norm < cfg.step_tol:
            termination = "converged_step"
            break
        asm = _Assembly(problem, cfg, whiteners)
    return SolveReport(iterations=iterations, initial_cost=initial_cost,
                       final_cost=cost, termination=termination,
                       family_costs=_Assembly(problem, cfg, whiteners,
                                              with_system=False).family_costs,
                       wall_time=time.perf_counter() - t_start,
                       cost_trace=trace)


# ---------------------------------------------------------------------------
# Marginalization

def marginalize(problem: WindowProblem, marg_indices,
                cfg: SolverConfig = SolverConfig(),
                eig_floor: float = 1e-9) -> tuple[MarginalPrior, list]:
    """Schur-complement the given knots out of the touching factors.

    Returns the new prior over the retained knots those factors touch,
    plus the list of surviving factors (the ones that touch no
    marginalized knot). Jacobian blocks that are numerically zero do not
    enlarge the prior support.
    """
    marg = sorted(set(marg_indices))
    marg_set = set(marg)
    folded = []
    surviving = []
    cache = EvalCache(problem.traj)
    for f in problem.all_factors():
        fr = f.evaluate(problem.traj, cache)
        support = {idx for idx, J in fr.jac.items()
                   if np.max(np.abs(J)) > 1e-12}
        if support & marg_set or isinstance(f, PriorFactor):
            folded.append((f, fr))
        else:
            surviving.append(f)
    keep = sorted({idx for _, fr in folded for idx, J in fr.jac.items()
                   if np.max(np.abs(J)) > 1e-12} - marg_set)
    order = marg + keep
    slot = {idx: i for i, idx in enumerate(order)}
    n = len(order) * KNOT_DOF
    H = np.zeros((n, n))
    g = np.zeros(n)
    for f, fr in folded:
        L = _whitener(fr.cov)
        r = L @ fr.r
        if f.family == "lidar":
            _, w = _huber_cost_and_weights(fr.r, cfg.huber_delta)
            sw = np.sqrt(w)
            r = sw * r
        else:
            sw = None
        blocks = {}
        for idx, J in fr.jac.items():
            if np.max(np.abs(J)) <= 1e-12:
                continue
            Jw = L @ J
            if sw is not None:
                Jw = sw[:, None] * Jw
            blocks[idx] = Jw
        for idx, Jw in blocks.items():
            si = slot[idx] * KNOT_DOF
            g[si:si + KNOT_DOF] += Jw.T @ r
            for jdx, Jw2 in blocks.items():
                sj = slot[jdx] * KNOT_DOF
                H[si:si + KNOT_DOF, sj:sj + KNOT_DOF] += Jw.T @ Jw2
    nm = len(marg) * KNOT_DOF
    Hmm = H[:nm, :nm]
    Hmk = H[:nm, nm:]
    Hkk = H[nm:, nm:]
    gm = g[:nm]
    gk = g[nm:]
    # damped pseudo-inverse of the marginalized block
    w, V = np.linalg.eigh(0.5 * (Hmm + Hmm.T))
    w_inv = np.where(w > eig_floor * max(1.0, w.max(initial=0.0)), 1.0 / np.maximum(w, 1e-300), 0.0)
    Hmm_inv = (V * w_inv) @ V.T
    H_new = Hkk - Hmk.T @ Hmm_inv @ Hmk
    g_new = gk - Hmk.T @ Hmm_inv @ gm
    lin = [problem.traj.knots[i] for i in keep]
    prior = MarginalPrior.from_information(keep, lin, H_new, g_new)
    return prior, surviving


def slide_and_marginalize(problem: WindowProblem, new_first: int,
                          cfg: SolverConfig = SolverConfig()) -> tuple[MarginalPrior, list]:
    """Marginalize every knot below the new window start."""
    marg = [i for i in problem.active.indices() if i < new_first]
    return marginalize(problem, marg, cfg)


# ---------------------------------------------------------------------------
# IMU factor construction and IMU-only initialization

def lfp_covariance(noise: ImuNoiseModel) -> np.ndarray:
    return np.diag([noise.sigma_a ** 2] * 3 + [noise.sigma_g ** 2] * 3)


def cvp_covariance(noise: ImuNoiseModel, g_norm: float,
                   sigma_cv: float = 0.0) -> np.ndarray:
    s = sigma_cv if sigma_cv > 0.0 else noise.sigma_a / g_norm
    return np.eye(2) * s * s


def bias_walk_covariance(noise: ImuNoiseModel, dt: float) -> np.ndarray:
    return np.diag([max(noise.sigma_ba, 1e-6) ** 2 * dt] * 3 +
                   [max(noise.sigma_bg, 1e-7) ** 2 * dt] * 3)


def build_imu_factors(traj: SplineTrajectory, measurements, segments,
                      cvp_events, g_w, noise: ImuNoiseModel,
                      sigma_cv: float = 0.0,
                      use_hybrid: bool = True) -> list:
    """CVP + HFP + LFP factors for labeled segments.

    With use_hybrid off, every segment contributes raw-measurement
    factors regardless of its label (the no-motion-switching ablation).
    """
    g_w = np.asarray(g_w, dtype=float)
    factors = []
    lfp_cov = lfp_covariance(noise)
    for seg in segments:
        if use_hybrid and seg.label == HFP:
            burst = slice_measurements(measurements, seg.t_start, seg.t_end)
            if len(burst) >= 2:
                b_a, b_g = traj.eval_biases(seg.t_start)
                pre = preintegrate(burst, b_a, b_g, noise)
                factors.append(HfpFactor(seg.t_start, seg.t_end, pre, g_w))
                continue
        for m in slice_measurements(measurements, seg.t_start, seg.t_end,
                                    include_end=False):
            factors.append(LfpFactor(m, g_w, lfp_cov))
    cvp_cov = cvp_covariance(noise, float(np.linalg.norm(g_w)), sigma_cv)
    by_time = {round(m.t, 9): m for m in measurements}
    for ev in cvp_events:
        m = by_time.get(round(ev.t, 9))
        if m is not None:
            factors.append(CvpFactor(ev.t, m, g_w, cvp_cov))
    return factors


def imu_only_init(traj: SplineTrajectory, measurements, segments, cvp_events,
                  g_w, noise: ImuNoiseModel, active: ActiveRange,
                  prior: MarginalPrior | None = None,
                  extra_factors=(), sigma_cv: float = 0.0,
                  use_hybrid: bool = True,
                  cfg: SolverConfig = SolverConfig()) -> SolveReport:
    """Optimize the active knots against IMU-derived factors only.

    The marginalization prior (and any standing factors, e.g. bias-walk
    links) participates as well; without it the pure IMU problem has
    translation/yaw/constant-velocity gauge freedom. Knots are updated
    in place.
    """
    factors = build_imu_factors(traj, measurements, segments, cvp_events,
                                g_w, noise, sigma_cv, use_hybrid)
    factors.extend(extra_factors)
    problem = WindowProblem(traj=traj, active=active, factors=factors,
                            prior=prior)
    return build_and_solve(problem, cfg)

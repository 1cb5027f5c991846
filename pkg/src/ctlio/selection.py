"""Optimality-aware correspondence selection.

Candidates are 1xd Jacobian rows of scalar point-to-plane residuals with
respect to the center knot (d = 6 in the pipeline: 3 rotation + 3
translation). The selected subset maximizes the minimum eigenvalue of
the accumulated information matrix sum J^T J, which bounds the
worst-observed direction. Because the objective is monotone submodular,
greedy-style solvers carry the classic (1 - 1/e - eps) guarantee in
expectation.

Solvers, ordered by cost:
    - greedy_select: exact marginal-gain greedy, the test oracle;
    - stochastic_greedy_select: samples ceil(|S|/N * ln(1/eps))
      candidates per step;
    - group_select: voxel-groups near-duplicate rows (after per-dimension
      normalization) and samples ceil(lambda * ln(1/eps)) groups per
      step, evaluating one representative each.

The voxel size comes from a lazy counting strategy: farthest point
sampling down to lambda*N rows, mean nearest-neighbor distance among the
kept rows, re-triggered only when the group count drifts by more than
the configured fraction.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class SelectionConfig:
    n_target: int = 500
    epsilon: float = 0.1
    grouping_factor: float = 2.0
    lcs_retrigger: float = 0.20

    def __post_init__(self):
        if self.n_target < 1:
            raise ValueError("n_target must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must be in (0, 1)")
        if self.grouping_factor < 1.0:
            raise ValueError("grouping_factor must be >= 1")


@dataclass
class SelectionResult:
    indices: list
    objective: float
    information: np.ndarray
    gain_evals: int
    diagnostics: dict = field(default_factory=dict)


def objective(information: np.ndarray) -> float:
    """Minimum eigenvalue of a symmetric PSD information matrix."""
    information = np.asarray(information, dtype=float)
    if np.max(np.abs(information - information.T)) > 1e-9:
        raise ValueError("information matrix must be symmetric")
    return float(np.linalg.eigvalsh(information)[0])


def _min_eig_with_rows(base: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """lambda_min(base + r^T r) for each row r, one batched eigen solve."""
    updated = base[None, :, :] + rows[:, :, None] * rows[:, None, :]
    return np.linalg.eigvalsh(updated)[:, 0]


def _lex_best(info: np.ndarray, rows: np.ndarray, cand: np.ndarray) -> int:
    """Candidate whose updated spectrum is lexicographically largest.

    Until the information matrix reaches full rank, every candidate has
    zero lambda_min gain; comparing the full ascending spectrum
    (lambda_min first, then lambda_2, ...) makes those plateau steps
    prefer new directions over near-duplicates. Exact spectrum ties fall
    back to the lowest candidate index, so selection stays deterministic.
    """
    updated = info[None, :, :] + rows[cand][:, :, None] * rows[cand][:, None, :]
    spec = np.linalg.eigvalsh(updated)
    d = spec.shape[1]
    keys = (cand,) + tuple(-spec[:, j] for j in range(d - 1, -1, -1))
    return int(cand[np.lexsort(keys)[0]])


def greedy_select(rows, n_target: int) -> SelectionResult:
    """Exhaustive-gain greedy; ties broken by lowest candidate index."""
    rows = np.asarray(rows, dtype=float)
    n, d = rows.shape
    if n_target > n:
        raise ValueError("cannot select more candidates than available")
    info = np.zeros((d, d))
    remaining = list(range(n))
    selected = []
    evals = 0
    for _ in range(n_target):
        cand = np.array(remaining)
        best = _lex_best(info, rows, cand)
        evals += len(cand)
        selected.append(best)
        remaining.remove(best)
        info += np.outer(rows[best], rows[best])
    return SelectionResult(selected, float(np.linalg.eigvalsh(info)[0]), info, evals)


def stochastic_greedy_select(rows, n_target: int, epsilon: float = 0.1,
                             seed: int = 0) -> SelectionResult:
    """Per step, evaluate a random subset of the remaining candidates.

    The subset size is ceil(|S| / N * ln(1/eps)) with |S| the original
    candidate count; when it covers the remainder this degenerates to
    plain greedy.
    """
    rows = np.asarray(rows, dtype=float)
    n, d = rows.shape
    if n_target > n:
        raise ValueError("cannot select more candidates than available")
    sample_size = max(1, int(np.ceil(n / n_target * np.log(1.0 / epsilon))))
    rng = np.random.default_rng(seed)
    info = np.zeros((d, d))
    remaining = list(range(n))
    selected = []
    evals = 0
    for _ in range(n_target):
        m = min(sample_size, len(remaining))
        pick = rng.choice(len(remaining), size=m, replace=False)
        cand = np.sort(np.array(remaining)[pick])
        best = _lex_best(info, rows, cand)
        evals += len(cand)
        selected.append(best)
        remaining.remove(best)
        info += np.outer(rows[best], rows[best])
    return SelectionResult(selected, float(np.linalg.eigvalsh(info)[0]), info, evals)


# ---------------------------------------------------------------------------
# Grouping machinery

def normalize_jacobians(rows):
    """Per-dimension standardization (J - mean) / std.

    Returns (normalized rows, means, stds). Dimensions with zero spread
    map to zero. The std convention (rather than variance) keeps the
    result invariant to positive affine rescaling of a raw dimension.
    """
    rows = np.asarray(rows, dtype=float)
    if len(rows) < 2:
        raise ValueError("need at least 2 candidates to normalize")
    mu = rows.mean(axis=0)
    sd = rows.std(axis=0)
    safe = np.where(sd > 0.0, sd, 1.0)
    out = (rows - mu) / safe
    out[:, sd == 0.0] = 0.0
    return out, mu, sd


def group_by_voxel(normalized_rows, voxel_size: float) -> dict:
    """Map integer voxel key -> candidate indices (stored order kept)."""
    if voxel_size <= 0.0:
        raise ValueError("voxel size must be positive")
    keys = np.floor(np.asarray(normalized_rows, dtype=float) / voxel_size)
    keys = keys.astype(np.int64)
    groups: dict = {}
    for i, key in enumerate(map(tuple, keys)):
        groups.setdefault(key, []).append(i)
    return groups


def farthest_point_sample(rows: np.ndarray, n_keep: int) -> np.ndarray:
    """Indices of a farthest-point subsample, seeded at index 0."""
    n = len(rows)
    if n_keep >= n:
        return np.arange(n)
    kept = np.empty(n_keep, dtype=np.int64)
    kept[0] = 0
    dist = np.linalg.norm(rows - rows[0], axis=1)
    for i in range(1, n_keep):
        nxt = int(np.argmax(dist))
        kept[i] = nxt
        d_new = np.linalg.norm(rows - rows[nxt], axis=1)
        np.minimum(dist, d_new, out=dist)
    return kept


def mean_nearest_neighbor_distance(rows: np.ndarray) -> float:
    tree = cKDTree(rows)
    d, _ = tree.query(rows, k=2)
    return float(np.mean(d[:, 1]))


def lazy_counting_voxel_size(normalized_rows, config: SelectionConfig,
                             prev_voxel: float | None = None,
                             prev_group_count: int | None = None) -> float:
    """Voxel size for grouping, recomputed only when counts drift.

    When the previous grouping produced within lcs_retrigger of the
    lambda*N target group count, the previous voxel size is reused.
    Otherwise the candidates are farthest-point-sampled down to
    lambda*N and the mean nearest-neighbor distance of the kept rows
    becomes the new voxel size.
    """
    rows = np.asarray(normalized_rows, dtype=float)
    target = config.grouping_factor * config.n_target
    if (prev_voxel is not None and prev_group_count is not None
            and abs(prev_group_count - target) <= config.lcs_retrigger * target):
        return prev_voxel
    n_keep = int(round(target))
    if len(rows) <= n_keep:
        return mean_nearest_neighbor_distance(rows)
    kept = farthest_point_sample(rows, n_keep)
    return mean_nearest_neighbor_distance(rows[kept])


def group_select(rows, config: SelectionConfig, seed: int = 0,
                 voxel_size: float | None = None,
                 normalized_rows: np.ndarray | None = None) -> SelectionResult:
    """Group-based stochastic greedy.

    Near-duplicate rows share a voxel group; each step samples
    ceil(lambda * ln(1/eps)) nonempty groups, takes the first remaining
    element of each, and adds the best of those representatives. The
    selected element is removed from its group. Runs out of groups
    before n_target only on degenerate inputs; a partial set is then
    returned with a diagnostic.
    """
    rows = np.asarray(rows, dtype=float)
    n, d = rows.shape
    if normalized_rows is None:
        normalized_rows, _, _ = normalize_jacobians(rows)
    if voxel_size is None:
        voxel_size = lazy_counting_voxel_size(normalized_rows, config)
    groups_map = group_by_voxel(normalized_rows, voxel_size)
    group_members = list(groups_map.values())
    heads = [0] * len(group_members)
    nonempty = list(range(len(group_members)))
    group_of = np.empty(n, dtype=np.int64)
    for gi, members in enumerate(group_members):
        for i in members:
            group_of[i] = gi

    sample_size = max(1, int(np.ceil(config.grouping_factor *
                                     np.log(1.0 / config.epsilon))))
    rng = np.random.default_rng(seed)
    info = np.zeros((d, d))
    selected = []
    evals = 0
    while len(selected) < config.n_target:
        if not nonempty:
            break
        m = min(sample_size, len(nonempty))
        pick = rng.choice(len(nonempty), size=m, replace=False)
        reps = sorted(group_members[nonempty[gi]][heads[nonempty[gi]]]
                      for gi in pick)
        cand = np.array(reps)
        best = _lex_best(info, rows, cand)
        evals += len(cand)
        selected.append(best)
        info += np.outer(rows[best], rows[best])
        gi = int(group_of[best])
        heads[gi] += 1
        if heads[gi] >= len(group_members[gi]):
            nonempty.remove(gi)
    diagnostics = {"n_groups": len(group_members), "voxel_size": voxel_size}
    if len(selected) < config.n_target:
        diagnostics["partial"] = True
    return SelectionResult(selected, float(np.linalg.eigvalsh(info)[0]),
                           info, evals, diagnostics)

"""Local map maintenance, scan deskewing, and point-to-plane association.

The map keeps voxel-downsampled world points from keyframes in a kd-tree
that is rebuilt on insertion; at the scales this system targets, the
rebuild is cheap and the queries behave exactly like an incremental
index. A keyframe is added when motion since the previous one exceeds
the translation or rotation threshold.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .bspline import SplineTrajectory
from .lie import Rotation


@dataclass
class Scan:
    """One LiDAR sweep: sensor-frame points with per-point time offsets."""

    t_start: float
    period: float
    points: np.ndarray   # (N, 3) sensor frame
    offsets: np.ndarray  # (N,) seconds within the sweep

    def times(self) -> np.ndarray:
        return self.t_start + self.offsets

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Correspondence:
    """Scan point matched to a locally fitted map plane."""

    point: np.ndarray      # sensor frame
    t: float
    n: np.ndarray          # unit plane normal (world)
    mu: np.ndarray         # plane centroid (world)
    planarity: float
    center_knot: int = -1
    info_row: np.ndarray = field(default_factory=lambda: np.zeros(6))


@dataclass
class Keyframe:
    t: float
    R: Rotation
    p: np.ndarray
    n_points: int


@dataclass(frozen=True)
class AssociationConfig:
    knn: int = 5
    max_neighbor_radius: float = 1.0
    max_plane_misfit: float = 0.1
    min_planarity: float = 0.9


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Keep the first point entering each voxel (deterministic order)."""
    if len(points) == 0 or voxel <= 0.0:
        return np.asarray(points, dtype=float)
    keys = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


class LocalMap:
    """Spatial index over accumulated world points."""

    def __init__(self, voxel_size: float = 0.2):
        self.voxel_size = voxel_size
        self.points = np.zeros((0, 3))
        self.keyframes: list[Keyframe] = []
        self._tree: cKDTree | None = None
        self.insertions = 0

    def __len__(self) -> int:
        return len(self.points)

    def insert(self, world_points: np.ndarray) -> int:
        pts = voxel_downsample(np.asarray(world_points, dtype=float),
                               self.voxel_size)
        if len(pts) == 0:
            return 0
        self.points = np.vstack([self.points, pts]) if len(self.points) else pts
        self._tree = cKDTree(self.points)
        self.insertions += 1
        return len(pts)

    def knn(self, query: np.ndarray, k: int):
        """Distances and indices of the k nearest points, sorted."""
        if self._tree is None:
            raise ValueError("map is empty")
        d, idx = self._tree.query(np.asarray(query, dtype=float), k=k)
        return np.atleast_1d(d), np.atleast_1d(idx)

    def export_xyz(self, path) -> None:
        with open(path, "w") as f:
            for p in self.points:
                f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def deskew(scan: Scan, traj: SplineTrajectory,
           time_bin: float = 0.0) -> np.ndarray:
    """Project each point into the world at its own timestamp.

    time_bin > 0 quantizes point times to a grid so points in one bin
    share a pose evaluation; with 1 ms bins the approximation error is
    far below the range noise and evaluation cost drops accordingly.
    """
    times = scan.times()
    if time_bin > 0.0:
        times = np.round(times / time_bin) * time_bin
    times = np.clip(times, traj.t0, np.nextafter(traj.t_end, -np.inf))
    out = np.empty_like(scan.points)
    order = np.argsort(times, kind="stable")
    sorted_t = times[order]
    start = 0
    while start < len(sorted_t):
        stop = start
        while stop < len(sorted_t) and sorted_t[stop] == sorted_t[start]:
            stop += 1
        sel = order[start:stop]
        R, p = traj.eval_pose(sorted_t[start])
        out[sel] = R.rotate(scan.points[sel]) + p
        start = stop
    return out


def fit_plane(neighbors: np.ndarray):
    """(mu, n, planarity): centroid, smallest-eigenvector normal, and
    1 - lambda_min/lambda_mid of the neighbor scatter."""
    mu = neighbors.mean(axis=0)
    centered = neighbors - mu
    cov = centered.T @ centered / len(neighbors)
    w, v = np.linalg.eigh(cov)
    n = v[:, 0]
    planarity = 1.0 - w[0] / max(w[1], 1e-12)
    return mu, n, float(planarity)


def associate(point_world: np.ndarray, point_sensor: np.ndarray, t: float,
              local_map: LocalMap, sensor_origin: np.ndarray,
              cfg: AssociationConfig = AssociationConfig()) -> Correspondence | None:
    """Match one deskewed point against the map; None when rejected."""
    if len(local_map) < cfg.knn:
        return None
    d, idx = local_map.knn(point_world, cfg.knn)
    if d[-1] > cfg.max_neighbor_radius:
        return None
    neighbors = local_map.points[idx]
    mu, n, planarity = fit_plane(neighbors)
    if planarity < cfg.min_planarity:
        return None
    if np.max(np.abs((neighbors - mu) @ n)) > cfg.max_plane_misfit:
        return None
    if n @ (np.asarray(sensor_origin, dtype=float) - mu) < 0.0:
        n = -n
    return Correspondence(point=np.asarray(point_sensor, dtype=float), t=t,
                          n=n, mu=mu, planarity=planarity)


def associate_batch(points_world: np.ndarray, points_sensor: np.ndarray,
                    times: np.ndarray, local_map: LocalMap,
                    sensor_origins: np.ndarray,
                    cfg: AssociationConfig = AssociationConfig()) -> list:
    """Vectorized association of a whole deskewed scan.

    Same gates as associate(); plane fits run as one batched eigen solve
    over all neighborhoods.
    """
    n = len(points_world)
    if n == 0 or len(local_map) < cfg.knn:
        return []
    d, idx = local_map.knn(points_world, cfg.knn)
    near = d[:, -1] <= cfg.max_neighbor_radius
    if not np.any(near):
        return []
    neigh = local_map.points[idx[near]]            # (m, knn, 3)
    mu = neigh.mean(axis=1)
    centered = neigh - mu[:, None, :]
    cov = np.einsum("mki,mkj->mij", centered, centered) / cfg.knn
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    planarity = 1.0 - w[:, 0] / np.maximum(w[:, 1], 1e-12)
    misfit = np.max(np.abs(np.einsum("mki,mi->mk", centered, normals)), axis=1)
    ok = (planarity >= cfg.min_planarity) & (misfit <= cfg.max_plane_misfit)
    sel = np.flatnonzero(near)[ok]
    mu, normals, planarity = mu[ok], normals[ok], planarity[ok]
    flip = np.einsum("mi,mi->m", normals,
                     sensor_origins[sel] - mu) < 0.0
    normals[flip] = -normals[flip]
    return [Correspondence(point=points_sensor[i].copy(), t=float(times[i]),
                           n=normals[j], mu=mu[j], planarity=float(planarity[j]))
            for j, i in enumerate(sel)]


@dataclass(frozen=True)
class KeyframeConfig:
    translation: float = 0.5
    rotation_deg: float = 10.0


def maybe_insert_keyframe(local_map: LocalMap, world_points: np.ndarray,
                          t: float, R: Rotation, p: np.ndarray,
                          cfg: KeyframeConfig = KeyframeConfig()) -> bool:
    """Insert when motion since the last keyframe exceeds a threshold.

    The first scan is always a keyframe.
    """
    if local_map.keyframes:
        last = local_map.keyframes[-1]
        dp = np.linalg.norm(p - last.p)
        dr = np.rad2deg(last.R.angle_to(R))
        if dp < cfg.translation and dr < cfg.rotation_deg:
            return False
    n = local_map.insert(world_points)
    local_map.keyframes.append(Keyframe(t=t, R=Rotation(R.q), p=np.asarray(p, dtype=float).copy(),
                                        n_points=n))
    return True


def load_scan(path) -> Scan:
    """Read the scan text format: header `t_start period n`, then x y z dt."""
    with open(path) as f:
        head = f.readline().split()
        t_start, period, n = float(head[0]), float(head[1]), int(head[2])
        pts = np.zeros((n, 3))
        offs = np.zeros(n)
        for i in range(n):
            vals = f.readline().split()
            pts[i] = [float(vals[0]), float(vals[1]), float(vals[2])]
            offs[i] = float(vals[3])
    return Scan(t_start=t_start, period=period, points=pts, offsets=offs)


def save_scan(path, scan: Scan) -> None:
    with open(path, "w") as f:
        f.write(f"{scan.t_start:.9f} {scan.period:.9f} {len(scan)}\n")
        for p, dt in zip(scan.points, scan.offsets):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {dt:.9f}\n")

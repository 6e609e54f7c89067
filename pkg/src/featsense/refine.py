"""Periodic voxelized-GICP post-registration of recent scans.

Targets are per-voxel Gaussian distributions aggregated from point
neighborhood covariances; the source scan is registered by minimizing
Mahalanobis distances between each transformed point and its voxel's
distribution. Triggered by travelled distance and seeded with the
incremental (not global) odometry estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from featsense import geometry
from featsense.errors import Degenerate, TooFewPoints
from featsense.scan_io import Pose

_PLANE_EIGENVALUES = np.array([1e-3, 1.0, 1.0])  # ascending, plane-like


@dataclass
class RefineParams:
    voxel_size: float = 0.5
    knn: int = 10
    trigger_distance: float = 5.0
    max_iters: int = 30
    lambda_init: float = 1e-4
    update_tol: float = 1e-6
    min_active: int = 50


@dataclass
class VoxelDistributionMap:
    voxel_size: float
    cells: dict = field(default_factory=dict)  # (i,j,k) -> (count, mean, cov)

    def lookup(self, point):
        key = tuple(np.floor(np.asarray(point) / self.voxel_size).astype(int))
        return self.cells.get(key)


@dataclass
class RefineState:
    trigger_distance: float = 5.0
    pending_scans: list = field(default_factory=list)  # (points, incremental Pose)
    distance_since_last: float = 0.0
    realtime: bool = False
    in_progress: bool = False

    def add_scan(self, points, incremental_pose: Pose, moved: float = 0.0):
        self.pending_scans.append((np.asarray(points, dtype=np.float64),
                                   incremental_pose))
        self.distance_since_last += max(0.0, moved)


def estimate_point_covariances(points: np.ndarray, knn: int = 10) -> np.ndarray:
    """k-NN covariance per point with eigenvalues regularized to (1e-3, 1, 1)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < knn:
        raise TooFewPoints(f"{len(points)} points < knn={knn}")
    tree = cKDTree(points)
    _, idx = tree.query(points, k=knn)
    nb = points[idx]
    x = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", x, x) / knn
    _, evecs = np.linalg.eigh(cov)
    return np.einsum("nij,j,nkj->nik", evecs, _PLANE_EIGENVALUES, evecs)


def build_voxel_distributions(points: np.ndarray, voxel_size: float = 0.5,
                              knn: int = 10) -> VoxelDistributionMap:
    """Aggregate per-point distributions into per-voxel (count, mean, cov)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    covs = estimate_point_covariances(points, knn)
    keys = np.floor(points / voxel_size).astype(np.int64)
    cells = {}
    for i, key in enumerate(map(tuple, keys)):
        if key in cells:
            n, m, c = cells[key]
            cells[key] = (n + 1, m + points[i], c + covs[i])
        else:
            cells[key] = (1, points[i].copy(), covs[i].copy())
    for key, (n, m, c) in cells.items():
        cells[key] = (n, m / n, c / n)
    return VoxelDistributionMap(voxel_size, cells)


def _active_cells(source, target, R, t):
    """Transformed points with a target cell: (y, mu, Cv, source index)."""
    y = source @ R.T + t
    keys = np.floor(y / target.voxel_size).astype(np.int64)
    hits, mus, cvs = [], [], []
    for i, key in enumerate(map(tuple, keys)):
        cell = target.cells.get(key)
        if cell is None:
            continue
        hits.append(i)
        mus.append(cell[1])
        cvs.append(cell[2])
    hits = np.array(hits, dtype=np.int64)
    return (y[hits], np.array(mus).reshape(-1, 3),
            np.array(cvs).reshape(-1, 3, 3), hits)


def vgicp_objective(source: np.ndarray, source_covs: np.ndarray,
                    target: VoxelDistributionMap, T: Pose) -> float:
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    R, t = T.matrix(), T.translation
    y, mu, cv, hits = _active_cells(source, target, R, t)
    if not len(hits):
        return 0.0
    d = mu - y
    omega = np.linalg.inv(cv + np.einsum(
        "ij,njk,lk->nil", R, source_covs[hits], R))
    return float(np.einsum("ni,nij,nj->", d, omega, d))


def vgicp_register(source: np.ndarray, source_covs: np.ndarray,
                   target: VoxelDistributionMap, T_init: Pose,
                   params: RefineParams | None = None) -> Pose:
    """Distribution-to-distribution registration by damped Gauss-Newton."""
    params = params or RefineParams()
    if not target.cells:
        raise Degenerate("empty target voxel map")
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    R, t = T_init.matrix(), T_init.translation.copy()
    lam = params.lambda_init

    skews = np.zeros((len(source), 3, 3))
    px, py, pz = source[:, 0], source[:, 1], source[:, 2]
    skews[:, 0, 1], skews[:, 0, 2] = -pz, py
    skews[:, 1, 0], skews[:, 1, 2] = pz, -px
    skews[:, 2, 0], skews[:, 2, 1] = -py, px

    for _ in range(params.max_iters):
        y, mu, cv, hits = _active_cells(source, target, R, t)
        active = len(hits)
        if active < params.min_active:
            raise Degenerate(f"only {active} active residuals")
        d = mu - y
        omega = np.linalg.inv(cv + np.einsum(
            "ij,njk,lk->nil", R, source_covs[hits], R))
        # J = d(mu - y)/d(delta) = [R skew(p), -R]
        J = np.concatenate([np.matmul(R, skews[hits]), np.broadcast_to(
            -R, (active, 3, 3))], axis=2)
        H = np.einsum("nij,nik,nkl->jl", J, omega, J)
        g = np.einsum("nij,nik,nk->j", J, omega, d)
        obj = float(np.einsum("ni,nij,nj->", d, omega, d))
        delta = np.linalg.solve(H + lam * np.eye(6), -g)
        R_new = R @ geometry.rotvec_to_matrix(delta[:3])
        t_new = t + R @ delta[3:]
        obj_new = vgicp_objective(source, source_covs, target,
                                  Pose.from_matrix(R_new, t_new))
        if obj_new <= obj:
            R, t = R_new, t_new
            lam = max(lam / 10.0, 1e-12)
            if np.linalg.norm(delta) < params.update_tol:
                break
        else:
            lam *= 10.0

    return Pose.from_matrix(R, t, T_init.timestamp)


def maybe_refine(state: RefineState, current_pose: Pose,
                 params: RefineParams | None = None) -> Pose | None:
    """Run post-registration when the trigger distance has been crossed.

    Returns the incremental correction to right-compose onto the current
    global pose, or None (not triggered, busy, or degenerate — refinement
    is best effort). On success the state is reset with the newest scan as
    the new epoch origin.
    """
    params = params or RefineParams()
    if state.realtime and state.in_progress:
        return None
    if state.distance_since_last < state.trigger_distance:
        return None
    if len(state.pending_scans) < 2:
        return None

    *older, (newest_pts, newest_pose) = state.pending_scans
    target_pts = np.vstack([pose.transform(pts) for pts, pose in older])
    try:
        target = build_voxel_distributions(target_pts, params.voxel_size,
                                           params.knn)
        source_covs = estimate_point_covariances(newest_pts, params.knn)
        refined = vgicp_register(newest_pts, source_covs, target,
                                 newest_pose, params)
    except (Degenerate, TooFewPoints):
        return None

    correction = newest_pose.inverse().compose(refined,
                                               timestamp=current_pose.timestamp)
    state.pending_scans = [(newest_pts, Pose.identity(newest_pose.timestamp))]
    state.distance_since_last = 0.0
    return correction

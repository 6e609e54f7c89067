"""Scan-to-map odometry: feature maps, correspondence fitting and the
weighted joint edge/surface minimization solved by damped Gauss-Newton.

The pose is parameterized by a right-multiplied local perturbation
(rotation vector w, translation u): T(d) = (R Exp(w), t + R u).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from featsense import geometry
from featsense.errors import Degenerate, MapEmpty
from featsense.features import FeatureCloud
from featsense.scan_io import Pose


@dataclass
class OdometryParams:
    corr_max_dist: float = 1.0
    eig_ratio: float = 3.0
    plane_max_point_dist: float = 0.2
    edge_half_len: float = 0.1
    huber_delta: float = 0.1
    lambda_init: float = 1e-4
    max_inner_iters: int = 10
    update_tol: float = 1e-6
    min_correspondences: int = 10
    edge_min: float = 0.1
    surf_max: float = 0.05
    weighting: str = "curvature"  # or "uniform"
    leaf_edge: float = 0.4
    leaf_surf: float = 0.8
    local_radius: float = 100.0


@dataclass
class EdgeCorrespondence:
    p_e: np.ndarray
    p_ea: np.ndarray
    p_eb: np.ndarray
    weight: float = 1.0


@dataclass
class SurfaceCorrespondence:
    p_s: np.ndarray
    n_hat: np.ndarray
    p_g: np.ndarray
    weight: float = 1.0


class FeatureMap:
    """Edge and surface landmark points with exact k-NN lookup."""

    def __init__(self, edge_points=None, surf_points=None):
        self.edge_points = np.zeros((0, 3)) if edge_points is None \
            else np.asarray(edge_points, dtype=np.float64).reshape(-1, 3)
        self.surf_points = np.zeros((0, 3)) if surf_points is None \
            else np.asarray(surf_points, dtype=np.float64).reshape(-1, 3)
        self._edge_tree = None
        self._surf_tree = None

    @property
    def n_edges(self):
        return len(self.edge_points)

    @property
    def n_surfaces(self):
        return len(self.surf_points)

    def is_empty(self):
        return self.n_edges == 0 and self.n_surfaces == 0

    def extents(self):
        pts = np.vstack([self.edge_points, self.surf_points])
        if len(pts) == 0:
            return np.zeros(3), np.zeros(3)
        return pts.min(axis=0), pts.max(axis=0)

    def edge_knn(self, query, k=5):
        if self._edge_tree is None:
            self._edge_tree = cKDTree(self.edge_points)
        return self._edge_tree.query(query, k=min(k, self.n_edges))

    def surf_knn(self, query, k=5):
        if self._surf_tree is None:
            self._surf_tree = cKDTree(self.surf_points)
        return self._surf_tree.query(query, k=min(k, self.n_surfaces))


def fit_edge(neighbors: np.ndarray, eig_ratio: float = 3.0):
    """Line fit by eigen-decomposition; None unless clearly 1-dimensional."""
    pts = np.asarray(neighbors, dtype=np.float64)
    center = pts.mean(axis=0)
    x = pts - center
    cov = x.T @ x / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    if evals[2] <= eig_ratio * evals[1]:
        return None
    return evecs[:, 2], center


def fit_plane(neighbors: np.ndarray, max_point_dist: float = 0.2):
    """Plane fit by eigen-decomposition; None if any neighbor is off-plane."""
    pts = np.asarray(neighbors, dtype=np.float64)
    center = pts.mean(axis=0)
    x = pts - center
    cov = x.T @ x / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    n_hat = evecs[:, 0]
    if np.any(np.abs(x @ n_hat) >= max_point_dist):
        return None
    return n_hat, center


def _batched_frames(neighbors):
    """Centroid, centered points and eigen-decomposition for (n, k, 3)."""
    center = neighbors.mean(axis=1)
    x = neighbors - center[:, None, :]
    cov = np.einsum("nki,nkj->nij", x, x) / neighbors.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    return center, x, evals, evecs


def build_correspondences(features: FeatureCloud, fmap: FeatureMap, T: Pose,
                          params: OdometryParams | None = None):
    params = params or OdometryParams()
    if fmap.is_empty():
        raise MapEmpty("feature map has no points")
    edge_corrs, surf_corrs = [], []

    if features.n_edges and fmap.n_edges >= 5:
        world = T.transform(features.edge_points)
        dists, idx = fmap.edge_knn(world, k=5)
        dists = np.atleast_2d(dists)
        idx = np.atleast_2d(idx)
        near = dists[:, 0] <= params.corr_max_dist
        cand = np.flatnonzero(near)
        if len(cand):
            center, _, evals, evecs = _batched_frames(
                fmap.edge_points[idx[cand]])
            ok = evals[:, 2] > params.eig_ratio * evals[:, 1]
            u_e = evecs[:, :, 2]
            if params.weighting == "curvature":
                w_all = np.minimum(
                    1.0, features.edge_curv[cand] / params.edge_min)
            else:
                w_all = np.ones(len(cand))
            for j in np.flatnonzero(ok):
                i = cand[j]
                edge_corrs.append(EdgeCorrespondence(
                    p_e=features.edge_points[i],
                    p_ea=center[j] + params.edge_half_len * u_e[j],
                    p_eb=center[j] - params.edge_half_len * u_e[j],
                    weight=float(w_all[j])))

    if features.n_surfaces and fmap.n_surfaces >= 5:
        world = T.transform(features.surf_points)
        dists, idx = fmap.surf_knn(world, k=5)
        dists = np.atleast_2d(dists)
        idx = np.atleast_2d(idx)
        near = dists[:, 0] <= params.corr_max_dist
        cand = np.flatnonzero(near)
        if len(cand):
            center, x, evals, evecs = _batched_frames(
                fmap.surf_points[idx[cand]])
            n_hat = evecs[:, :, 0]
            offsets = np.abs(np.einsum("nki,ni->nk", x, n_hat))
            ok = (offsets < params.plane_max_point_dist).all(axis=1)
            if params.weighting == "curvature":
                w_all = np.minimum(1.0, params.surf_max / np.maximum(
                    features.surf_curv[cand], 1e-12))
            else:
                w_all = np.ones(len(cand))
            for j in np.flatnonzero(ok):
                i = cand[j]
                surf_corrs.append(SurfaceCorrespondence(
                    p_s=features.surf_points[i], n_hat=n_hat[j],
                    p_g=center[j], weight=float(w_all[j])))

    return edge_corrs, surf_corrs


def edge_residual(c: EdgeCorrespondence, T: Pose) -> float:
    y = T.matrix() @ c.p_e + T.translation
    cr = np.cross(y - c.p_ea, y - c.p_eb)
    return float(np.linalg.norm(cr) / np.linalg.norm(c.p_ea - c.p_eb))


def surface_residual(c: SurfaceCorrespondence, T: Pose) -> float:
    y = T.matrix() @ c.p_s + T.translation
    return float(np.dot(y - c.p_g, c.n_hat))


def _edge_residual_jac(c: EdgeCorrespondence, R, t):
    y = R @ c.p_e + t
    cr = np.cross(y - c.p_ea, y - c.p_eb)
    L = np.linalg.norm(c.p_ea - c.p_eb)
    n = np.linalg.norm(cr)
    r = n / L
    if n < 1e-12:
        return r, np.zeros(6)
    grad_y = cr @ geometry.skew(c.p_eb - c.p_ea) / (n * L)
    J = np.concatenate([grad_y @ (-R @ geometry.skew(c.p_e)), grad_y @ R])
    return r, J


def _surface_residual_jac(c: SurfaceCorrespondence, R, t):
    y = R @ c.p_s + t
    r = float(np.dot(y - c.p_g, c.n_hat))
    grad_y = c.n_hat
    J = np.concatenate([grad_y @ (-R @ geometry.skew(c.p_s)), grad_y @ R])
    return r, J


def residual_jacobian(corr, T: Pose):
    """Residual and analytic Jacobian w.r.t. the 6 local coordinates."""
    R, t = T.matrix(), T.translation
    if isinstance(corr, EdgeCorrespondence):
        return _edge_residual_jac(corr, R, t)
    return _surface_residual_jac(corr, R, t)


def _huber_rho(r, delta):
    a = abs(r)
    return 0.5 * r * r if a <= delta else delta * (a - 0.5 * delta)


class _CorrBatch:
    """Stacked correspondence arrays for vectorized residuals/Jacobians."""

    def __init__(self, edge_corrs, surf_corrs):
        self.n = len(edge_corrs) + len(surf_corrs)
        self.e_p = np.array([c.p_e for c in edge_corrs]).reshape(-1, 3)
        self.e_a = np.array([c.p_ea for c in edge_corrs]).reshape(-1, 3)
        self.e_b = np.array([c.p_eb for c in edge_corrs]).reshape(-1, 3)
        self.e_w = np.array([c.weight for c in edge_corrs])
        self.e_len = np.linalg.norm(self.e_a - self.e_b, axis=1)
        self.s_p = np.array([c.p_s for c in surf_corrs]).reshape(-1, 3)
        self.s_n = np.array([c.n_hat for c in surf_corrs]).reshape(-1, 3)
        self.s_g = np.array([c.p_g for c in surf_corrs]).reshape(-1, 3)
        self.s_w = np.array([c.weight for c in surf_corrs])

    def residuals_jacobians(self, R, t):
        rows_r, rows_J, rows_w = [], [], []
        if len(self.e_p):
            y = self.e_p @ R.T + t
            cr = np.cross(y - self.e_a, y - self.e_b)
            nrm = np.linalg.norm(cr, axis=1)
            r = nrm / self.e_len
            safe = np.maximum(nrm, 1e-300)
            grad = np.cross(cr, self.e_b - self.e_a) / \
                (safe * self.e_len)[:, None]
            grad[nrm < 1e-12] = 0.0
            gR = grad @ R
            J = np.concatenate([-np.cross(gR, self.e_p), gR], axis=1)
            rows_r.append(r)
            rows_J.append(J)
            rows_w.append(self.e_w)
        if len(self.s_p):
            y = self.s_p @ R.T + t
            r = np.einsum("ni,ni->n", y - self.s_g, self.s_n)
            gR = self.s_n @ R
            J = np.concatenate([-np.cross(gR, self.s_p), gR], axis=1)
            rows_r.append(r)
            rows_J.append(J)
            rows_w.append(self.s_w)
        r = np.concatenate(rows_r) if rows_r else np.zeros(0)
        J = np.vstack(rows_J) if rows_J else np.zeros((0, 6))
        w = np.concatenate(rows_w) if rows_w else np.zeros(0)
        return r, J, w

    def objective(self, R, t, delta):
        r, _, w = self.residuals_jacobians(R, t)
        a = np.abs(r)
        rho = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
        return float(np.dot(w, rho))


def _apply_delta(R, t, d):
    return R @ geometry.rotvec_to_matrix(d[:3]), t + R @ d[3:]


def register_scan(features: FeatureCloud, fmap: FeatureMap, T_init: Pose,
                  opt_steps: int = 5,
                  params: OdometryParams | None = None) -> Pose:
    """Refine T_init by ``opt_steps`` rounds of correspondence building and
    damped Gauss-Newton over the robustified weighted squared residuals."""
    params = params or OdometryParams()
    if fmap.is_empty():
        raise MapEmpty("feature map has no points")
    R, t = T_init.matrix(), T_init.translation.copy()

    for _ in range(max(1, opt_steps)):
        T = Pose.from_matrix(R, t, T_init.timestamp)
        edge_corrs, surf_corrs = build_correspondences(features, fmap, T, params)
        batch = _CorrBatch(edge_corrs, surf_corrs)
        if batch.n < params.min_correspondences:
            raise Degenerate(f"only {batch.n} correspondences")

        lam = params.lambda_init
        obj = batch.objective(R, t, params.huber_delta)
        for _ in range(params.max_inner_iters):
            r, J, cw = batch.residuals_jacobians(R, t)
            a = np.abs(r)
            wh = np.where(a <= params.huber_delta, 1.0,
                          params.huber_delta / np.maximum(a, 1e-300))
            w = cw * wh
            Jw = J * w[:, None]
            H = Jw.T @ J
            g = Jw.T @ r
            evals = np.linalg.eigvalsh(H)
            if evals[-1] <= 0 or evals[0] < 1e-9 * evals[-1]:
                raise Degenerate("rank-deficient normal equations")
            d = np.linalg.solve(H + lam * np.eye(6), -g)
            R_new, t_new = _apply_delta(R, t, d)
            obj_new = batch.objective(R_new, t_new, params.huber_delta)
            if obj_new <= obj:
                R, t, obj = R_new, t_new, obj_new
                lam = max(lam / 10.0, 1e-12)
                if np.linalg.norm(d) < params.update_tol:
                    break
            else:
                lam *= 10.0

    return Pose.from_matrix(R, t, features.timestamp or T_init.timestamp)


def predict_motion(prev: Pose, prev2: Pose) -> Pose:
    """Constant-velocity extrapolation: prev ∘ (prev2⁻¹ ∘ prev)."""
    step = prev2.inverse().compose(prev)
    ts = prev.timestamp + (prev.timestamp - prev2.timestamp)
    return prev.compose(step, timestamp=ts)


def voxel_downsample(points: np.ndarray, leaf: float) -> np.ndarray:
    """Centroid per occupied voxel, in canonical (sorted key) order."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0 or leaf <= 0:
        return points
    keys = np.floor(points / leaf).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys, points = keys[order], points[order]
    uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True,
                                  return_counts=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inv, points)
    return sums / counts[:, None]


def update_feature_maps(fmap: FeatureMap, features: FeatureCloud, T: Pose,
                        leaf_edge: float = 0.4, leaf_surf: float = 0.8,
                        local_radius: float = 100.0) -> FeatureMap:
    """Insert transformed features, downsample, evict far-away points."""
    edge = np.vstack([fmap.edge_points, T.transform(features.edge_points)]) \
        if features.n_edges else fmap.edge_points
    surf = np.vstack([fmap.surf_points, T.transform(features.surf_points)]) \
        if features.n_surfaces else fmap.surf_points
    edge = voxel_downsample(edge, leaf_edge)
    surf = voxel_downsample(surf, leaf_surf)
    center = T.translation
    if len(edge):
        edge = edge[np.linalg.norm(edge - center, axis=1) <= local_radius]
    if len(surf):
        surf = surf[np.linalg.norm(surf - center, axis=1) <= local_radius]
    return FeatureMap(edge, surf)

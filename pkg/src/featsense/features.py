"""Per-point curvature, edge/surface classification and intensity fusion.

Curvature of cell i on a scan line is the squared norm of
(sum of the 2*half_window column neighbors) - 2*half_window * P_i,
summed over x/y/z and divided by (2*half_window * range)^2 so thresholds
are range-independent. Columns wrap (360° sweep).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from featsense.scan_io import StructuredScan


@dataclass
class FeatureParams:
    half_window: int = 5
    n_subregions: int = 6
    edge_min: float = 0.1
    edge_max: float = 10.0
    surf_max: float = 0.05
    max_edges_per_subregion: int = 4
    max_surf_per_subregion: int = 8
    suppress_radius: int = 5
    parallel_angle_deg: float = 10.0
    occlusion_gap: float = 0.5


@dataclass
class CurvatureGrid:
    rows: int
    cols: int
    c: np.ndarray
    valid: np.ndarray


@dataclass
class FeatureCloud:
    """Edge and surface feature points (sensor frame) with their curvatures."""

    edge_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    edge_curv: np.ndarray = field(default_factory=lambda: np.zeros(0))
    edge_cells: list = field(default_factory=list)
    surf_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    surf_curv: np.ndarray = field(default_factory=lambda: np.zeros(0))
    surf_cells: list = field(default_factory=list)
    timestamp: float = 0.0

    @property
    def n_edges(self):
        return len(self.edge_points)

    @property
    def n_surfaces(self):
        return len(self.surf_points)


def compute_curvature(scan: StructuredScan, half_window: int = 5,
                      normalize: bool = True) -> CurvatureGrid:
    h = half_window
    if h < 1:
        raise ValueError("half_window must be >= 1")
    win = 2 * h + 1
    rows, cols = scan.rows, scan.cols
    if cols < win:
        return CurvatureGrid(rows, cols, np.zeros((rows, cols)),
                             np.zeros((rows, cols), dtype=bool))
    kernel = np.ones(win)
    pts = np.where(scan.valid[:, :, None], scan.points, 0.0)
    diff = np.zeros((rows, cols))
    for d in range(3):
        s = convolve1d(pts[:, :, d], kernel, axis=1, mode="wrap")
        diff += (s - win * pts[:, :, d]) ** 2
    ok = convolve1d(scan.valid.astype(np.int64), kernel.astype(np.int64),
                    axis=1, mode="wrap") == win
    ok &= scan.valid
    c = np.where(ok, diff, 0.0)
    if normalize:
        rng = scan.ranges()
        denom = (2 * h * np.where(ok, rng, 1.0)) ** 2
        c = c / denom
    return CurvatureGrid(rows, cols, c, ok)


def parallel_beam_test(scan: StructuredScan, row: int, col: int,
                       angle_threshold: float = 10.0) -> bool:
    """True when the local surface tangent is nearly parallel to the beam."""
    cl, cr = (col - 1) % scan.cols, (col + 1) % scan.cols
    if not (scan.valid[row, col] and scan.valid[row, cl] and scan.valid[row, cr]):
        return False
    p = scan.points[row, col]
    tangent = scan.points[row, cr] - scan.points[row, cl]
    tn = np.linalg.norm(tangent)
    pn = np.linalg.norm(p)
    if tn == 0 or pn == 0:
        return False
    cosang = abs(np.dot(p / pn, tangent / tn))
    return cosang > np.cos(np.radians(angle_threshold))


def occlusion_test(scan: StructuredScan, row: int, col: int,
                   gap_threshold: float = 0.5) -> bool:
    """True when the cell sits on the far side of a large range jump."""
    if not scan.valid[row, col]:
        return False
    r0 = np.linalg.norm(scan.points[row, col])
    for nb in ((col - 1) % scan.cols, (col + 1) % scan.cols):
        if scan.valid[row, nb]:
            if r0 - np.linalg.norm(scan.points[row, nb]) > gap_threshold:
                return True
    return False


def _passes_geometry_rules(scan, row, col, params) -> bool:
    if parallel_beam_test(scan, row, col, params.parallel_angle_deg):
        return False
    if occlusion_test(scan, row, col, params.occlusion_gap):
        return False
    return True


def classify_features(scan: StructuredScan, curv: CurvatureGrid,
                      mask: np.ndarray,
                      params: FeatureParams | None = None) -> FeatureCloud:
    """Select edge/surface features per subregion and fuse with the edge mask.

    Per scan line and equal column span: a descending-curvature pass picks
    edges with curvature in (edge_min, edge_max], an ascending pass picks
    surfaces below surf_max. Selection suppresses ±suppress_radius column
    neighbors; grazing-incidence and occlusion-boundary cells are excluded.
    Finally edges must coincide with the intensity edge mask, surfaces must
    not.
    """
    params = params or FeatureParams()
    rows, cols = scan.rows, scan.cols
    edges, surfs = [], []

    for r in range(rows):
        picked = np.zeros(cols, dtype=bool)
        bounds = np.linspace(0, cols, params.n_subregions + 1).astype(int)
        for s, e in zip(bounds[:-1], bounds[1:]):
            cand = [c for c in range(s, e) if curv.valid[r, c]]
            if not cand:
                continue
            by_curv = sorted(cand, key=lambda c: (-curv.c[r, c], c))
            n_edge = 0
            for c in by_curv:
                if n_edge >= params.max_edges_per_subregion:
                    break
                cv = curv.c[r, c]
                if cv <= params.edge_min:
                    break
                if cv > params.edge_max or picked[c]:
                    continue
                if not _passes_geometry_rules(scan, r, c, params):
                    continue
                edges.append((r, c, cv))
                n_edge += 1
                lo = np.arange(c - params.suppress_radius,
                               c + params.suppress_radius + 1) % cols
                picked[lo] = True
            n_surf = 0
            for c in reversed(by_curv):
                if n_surf >= params.max_surf_per_subregion:
                    break
                cv = curv.c[r, c]
                if cv >= params.surf_max:
                    break
                if picked[c]:
                    continue
                if not _passes_geometry_rules(scan, r, c, params):
                    continue
                surfs.append((r, c, cv))
                n_surf += 1
                lo = np.arange(c - params.suppress_radius,
                               c + params.suppress_radius + 1) % cols
                picked[lo] = True

    edges = [(r, c, cv) for r, c, cv in edges if mask[r, c]]
    surfs = [(r, c, cv) for r, c, cv in surfs if not mask[r, c]]

    cloud = FeatureCloud(timestamp=scan.timestamp)
    if edges:
        cloud.edge_points = np.array([scan.points[r, c] for r, c, _ in edges])
        cloud.edge_curv = np.array([cv for _, _, cv in edges])
        cloud.edge_cells = [(r, c) for r, c, _ in edges]
    if surfs:
        cloud.surf_points = np.array([scan.points[r, c] for r, c, _ in surfs])
        cloud.surf_curv = np.array([cv for _, _, cv in surfs])
        cloud.surf_cells = [(r, c) for r, c, _ in surfs]
    return cloud

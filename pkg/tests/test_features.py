import numpy as np
import pytest

from featsense import features
from featsense.features import (
    FeatureParams,
    classify_features,
    compute_curvature,
    occlusion_test,
    parallel_beam_test,
)
from featsense.geometry import rotvec_to_matrix
from featsense.scan_io import Pose, StructuredScan


def make_scan(points, valid=None, intensity=None):
    points = np.asarray(points, dtype=np.float64)
    rows, cols = points.shape[:2]
    if valid is None:
        valid = np.ones((rows, cols), dtype=bool)
    if intensity is None:
        intensity = np.zeros((rows, cols))
    if rows == 1:
        # scans require two lines; pad with an invalid one
        points = np.concatenate([points, np.zeros((1, cols, 3))])
        valid = np.concatenate([valid, np.zeros((1, cols), dtype=bool)])
        intensity = np.concatenate([intensity, np.zeros((1, cols))])
        rows = 2
    return StructuredScan(rows, cols, points, intensity, valid)


def naive_curvature(scan, h, normalize=True):
    """Reference double loop evaluation of the scan line curvature."""
    rows, cols = scan.rows, scan.cols
    c = np.zeros((rows, cols))
    ok = np.zeros((rows, cols), dtype=bool)
    if cols < 2 * h + 1:
        return c, ok
    for r in range(rows):
        for i in range(cols):
            if not scan.valid[r, i]:
                continue
            nbrs = [(i + d) % cols for d in range(-h, h + 1) if d != 0]
            if not all(scan.valid[r, j] for j in nbrs):
                continue
            diff = sum(scan.points[r, j] for j in nbrs) \
                - 2 * h * scan.points[r, i]
            val = float(np.dot(diff, diff))
            if normalize:
                val /= (2 * h * np.linalg.norm(scan.points[r, i])) ** 2
            c[r, i] = val
            ok[r, i] = True
    return c, ok


class TestCurvature:
    def test_matches_reference_random(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(1.0, 5.0, (4, 24, 3))
        valid = rng.random((4, 24)) > 0.15
        scan = make_scan(pts, valid)
        for h in (1, 3, 5):
            grid = compute_curvature(scan, h)
            ref_c, ref_ok = naive_curvature(scan, h)
            assert np.array_equal(grid.valid, ref_ok)
            assert np.allclose(grid.c, ref_c, rtol=1e-12, atol=1e-12)

    def test_hand_value_three_points(self):
        # wrap, h=1: diff at center = (1+4) - 2*2 = 1, range 2 -> 1/16
        pts = np.array([[[1.0, 0, 0], [2.0, 0, 0], [4.0, 0, 0]]])
        grid = compute_curvature(make_scan(pts), half_window=1)
        assert grid.valid[0].all()
        assert grid.c[0, 1] == pytest.approx(1.0 / 16.0, rel=1e-12)

    def test_straight_line_zero(self):
        # collinear equally spaced points: neighbor sum cancels exactly
        cols = 32
        t = np.linspace(-3, 3, cols)
        pts = np.zeros((1, cols, 3))
        pts[0, :, 0] = 5.0
        pts[0, :, 1] = t
        grid = compute_curvature(make_scan(pts), half_window=3)
        # the column seam wraps, so only interior cells are collinear windows
        assert np.allclose(grid.c[0, 3:-3], 0.0, atol=1e-20)

    def test_invalid_neighbor_invalidates_window(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(1, 3, (1, 20, 3))
        valid = np.ones((1, 20), dtype=bool)
        valid[0, 10] = False
        grid = compute_curvature(make_scan(pts, valid), half_window=2)
        assert not grid.valid[0, 8:13].any()
        assert grid.valid[0, 7] and grid.valid[0, 13]

    def test_too_few_columns(self):
        pts = np.ones((2, 4, 3))
        grid = compute_curvature(make_scan(pts), half_window=5)
        assert not grid.valid.any()

    def test_rigid_invariance_unnormalized(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(1, 5, (3, 30, 3))
        scan = make_scan(pts)
        R = rotvec_to_matrix(np.array([0.3, -0.2, 0.9]))
        t = np.array([10.0, -4.0, 2.0])
        moved = make_scan(pts @ R.T + t)
        a = compute_curvature(scan, 4, normalize=False)
        b = compute_curvature(moved, 4, normalize=False)
        assert np.allclose(a.c, b.c, rtol=1e-9, atol=1e-9)

    def test_rotation_invariance_normalized(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(1, 5, (3, 30, 3))
        R = rotvec_to_matrix(np.array([-0.1, 0.4, 0.2]))
        a = compute_curvature(make_scan(pts), 4)
        b = compute_curvature(make_scan(pts @ R.T), 4)
        assert np.allclose(a.c, b.c, rtol=1e-9, atol=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        scan = make_scan(rng.uniform(1, 5, (4, 40, 3)))
        grid = compute_curvature(scan, 5)
        assert (grid.c >= 0).all()


class TestGeometryRules:
    def _row_scan(self, row_points):
        pts = np.asarray(row_points)[None, :, :]
        return make_scan(pts)

    def test_parallel_beam_detected(self):
        scan = self._row_scan([[4.5, -0.05, 0], [5.0, 0.0, 0],
                               [5.5, 0.05, 0], [6.0, 0.1, 0]])
        assert parallel_beam_test(scan, 0, 1)

    def test_perpendicular_wall_passes(self):
        scan = self._row_scan([[5.0, -0.1, 0], [5.0, 0.0, 0],
                               [5.0, 0.1, 0], [5.0, 0.2, 0]])
        assert not parallel_beam_test(scan, 0, 1)

    def test_parallel_threshold_boundary(self):
        def tangent_scan(deg):
            ang = np.radians(deg)
            p = np.array([5.0, 0.0, 0.0])
            tang = np.array([np.cos(ang), np.sin(ang), 0.0])
            return self._row_scan([p - 0.1 * tang, p, p + 0.1 * tang,
                                   p + 0.2 * tang])

        assert parallel_beam_test(tangent_scan(9.5), 0, 1, angle_threshold=10.0)
        assert not parallel_beam_test(tangent_scan(10.5), 0, 1,
                                      angle_threshold=10.0)

    def test_occlusion_far_side_flagged(self):
        scan = self._row_scan([[2.0, 0, 0], [2.0, 0.1, 0],
                               [5.0, 0.2, 0], [5.0, 0.3, 0]])
        assert occlusion_test(scan, 0, 2)
        assert not occlusion_test(scan, 0, 1)

    def test_small_gap_not_occlusion(self):
        scan = self._row_scan([[2.0, 0, 0], [2.0, 0.1, 0],
                               [2.4, 0.2, 0], [2.4, 0.3, 0]])
        assert not occlusion_test(scan, 0, 2)

    def test_invalid_cell_false(self):
        pts = np.ones((1, 4, 3))
        valid = np.ones((1, 4), dtype=bool)
        valid[0, 1] = False
        scan = make_scan(pts, valid)
        assert not parallel_beam_test(scan, 0, 1)
        assert not occlusion_test(scan, 0, 1)


def corner_scan(rows=4, cols=64, dist=3.0):
    """Square room: four vertical walls, corners at azimuth +-45/+-135."""
    from featsense.synth import Plane, Scene, simulate_scan
    scene = Scene([Plane(np.array([1.0, 0, 0]), -dist, 0.5),
                   Plane(np.array([1.0, 0, 0]), dist, 0.5),
                   Plane(np.array([0, 1.0, 0]), -dist, 0.5),
                   Plane(np.array([0, 1.0, 0]), dist, 0.5)])
    return simulate_scan(scene, Pose.identity(), rows=rows, cols=cols,
                         vfov=20.0)


# thresholds sized for the room above: corner cells sit near 0.015,
# wall cells below 0.0007
ROOM_PARAMS = FeatureParams(half_window=3, suppress_radius=3,
                            edge_min=0.005, surf_max=0.001)


class TestClassify:
    def _run(self, scan, mask=None, params=None):
        params = params or ROOM_PARAMS
        curv = compute_curvature(scan, params.half_window)
        if mask is None:
            mask = np.ones((scan.rows, scan.cols), dtype=bool)
        return classify_features(scan, curv, mask, params)

    def test_corner_yields_edges_at_apex(self):
        scan = corner_scan()
        cloud = self._run(scan)
        assert cloud.n_edges >= scan.rows
        az = np.degrees(np.arctan2(cloud.edge_points[:, 1],
                                   cloud.edge_points[:, 0]))
        near_corner = np.minimum(np.abs(np.abs(az) - 45),
                                 np.abs(np.abs(az) - 135))
        assert (near_corner < 10).all()

    def test_walls_yield_surfaces(self):
        scan = corner_scan()
        cloud = self._run(scan, mask=np.zeros((scan.rows, scan.cols),
                                              dtype=bool))
        assert cloud.n_surfaces > 0
        assert (cloud.surf_curv < ROOM_PARAMS.surf_max).all()

    def test_mask_fusion_edges_require_mask(self):
        scan = corner_scan()
        no_mask = self._run(scan, mask=np.zeros((scan.rows, scan.cols),
                                                dtype=bool))
        assert no_mask.n_edges == 0
        all_mask = self._run(scan)
        assert all_mask.n_surfaces == 0

    def test_mask_fusion_applied_after_selection(self):
        # masking out the apex must not promote weaker cells into edges
        scan = corner_scan()
        full = self._run(scan)
        mask = np.ones((scan.rows, scan.cols), dtype=bool)
        r, c = full.edge_cells[0]
        mask[r, c] = False
        partial = self._run(scan, mask=mask)
        assert partial.n_edges == full.n_edges - 1
        assert (r, c) not in partial.edge_cells

    def test_subregion_caps(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(1, 5, (2, 60, 3))
        scan = make_scan(pts)
        params = FeatureParams(half_window=2, n_subregions=4,
                               max_edges_per_subregion=2,
                               max_surf_per_subregion=3, suppress_radius=0,
                               edge_max=np.inf)
        curv = compute_curvature(scan, params.half_window)
        mask = np.ones((2, 60), dtype=bool)
        cloud = classify_features(scan, curv, mask, params)
        bounds = np.linspace(0, 60, 5).astype(int)
        for r in range(2):
            for s, e in zip(bounds[:-1], bounds[1:]):
                n = sum(1 for rr, cc in cloud.edge_cells
                        if rr == r and s <= cc < e)
                assert n <= 2

    def test_suppression_radius(self):
        scan = corner_scan(cols=128)
        params = FeatureParams(half_window=3, suppress_radius=6,
                               edge_min=0.005, surf_max=0.001)
        curv = compute_curvature(scan, params.half_window)
        cloud = classify_features(
            scan, curv, np.ones((scan.rows, scan.cols), dtype=bool), params)
        cells = cloud.edge_cells + cloud.surf_cells
        for i, (r1, c1) in enumerate(cells):
            for r2, c2 in cells[i + 1:]:
                if r1 != r2:
                    continue
                d = abs(c1 - c2)
                assert min(d, scan.cols - d) > 6

    def test_edge_curvature_range(self):
        scan = corner_scan()
        cloud = self._run(scan)
        assert (cloud.edge_curv > ROOM_PARAMS.edge_min).all()
        assert (cloud.edge_curv <= ROOM_PARAMS.edge_max).all()

    def test_empty_scan(self):
        pts = np.zeros((2, 20, 3))
        scan = make_scan(pts, valid=np.zeros((2, 20), dtype=bool))
        cloud = self._run(scan)
        assert cloud.n_edges == 0 and cloud.n_surfaces == 0

    def test_deterministic(self):
        scan = corner_scan()
        a = self._run(scan)
        b = self._run(scan)
        assert np.array_equal(a.edge_points, b.edge_points)
        assert np.array_equal(a.surf_points, b.surf_points)


def test_hypothesis_curvature_matches_reference():
    from hypothesis import given, settings
    from hypothesis import strategies as st
    from hypothesis.extra import numpy as hnp

    @settings(max_examples=30, deadline=None)
    @given(pts=hnp.arrays(np.float64, (2, 12, 3),
                          elements=st.floats(0.5, 8.0)),
           holes=st.lists(st.integers(0, 23), max_size=4))
    def check(pts, holes):
        valid = np.ones((2, 12), dtype=bool)
        for h in holes:
            valid[h // 12, h % 12] = False
        scan = make_scan(pts, valid)
        grid = compute_curvature(scan, 2)
        ref_c, ref_ok = naive_curvature(scan, 2)
        assert np.array_equal(grid.valid, ref_ok)
        assert np.allclose(grid.c, ref_c, rtol=1e-10, atol=1e-10)

    check()

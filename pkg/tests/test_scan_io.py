import numpy as np
import pytest

from featsense import scan_io
from featsense.errors import (
    DimensionMismatch,
    EmptyCloud,
    MalformedFile,
    MalformedLine,
    NonMonotonicTimestamps,
)
from featsense.scan_io import Pose, StructuredScan, Trajectory


def make_scan(rows=2, cols=4, seed=0):
    rng = np.random.default_rng(seed)
    points = rng.uniform(1.0, 5.0, (rows, cols, 3))
    intensity = rng.uniform(0.0, 1.0, (rows, cols))
    valid = np.ones((rows, cols), dtype=bool)
    return StructuredScan(rows, cols, points, intensity, valid,
                          timestamp=1.5, vfov=45.0)


def test_scan_round_trip_values(tmp_path):
    scan = make_scan()
    path = tmp_path / "a.fscn"
    scan_io.write_scan(scan, path)
    back = scan_io.read_scan(path)
    assert back.rows == 2 and back.cols == 4
    assert back.valid.all()
    assert np.allclose(back.points, scan.points, atol=1e-5)
    assert np.allclose(back.intensity, scan.intensity, atol=1e-6)
    assert back.timestamp == scan.timestamp


def test_scan_round_trip_byte_identical(tmp_path):
    # canonical file: write, read, write again -> identical bytes
    scan = make_scan(4, 8, seed=1)
    p1, p2 = tmp_path / "a.fscn", tmp_path / "b.fscn"
    scan_io.write_scan(scan, p1)
    scan_io.write_scan(scan_io.read_scan(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_nan_point_becomes_invalid(tmp_path):
    scan = make_scan()
    scan.points[1, 2] = np.nan
    path = tmp_path / "a.fscn"
    # raw file containing a NaN record
    rec = np.zeros((2, 4, 4), dtype="<f4")
    rec[:, :, :3] = scan.points
    rec[:, :, 3] = scan.intensity
    header = scan_io._HEADER.pack(b"FSCN", 2, 4, np.float32(45.0), 1.5,
                                  np.float32(1.0))
    path.write_bytes(header + rec.tobytes())
    back = scan_io.read_scan(path)
    assert not back.valid[1, 2]
    assert back.valid.sum() == 7
    assert (back.points[1, 2] == 0).all()


def test_bad_magic(tmp_path):
    path = tmp_path / "a.fscn"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(MalformedFile):
        scan_io.read_scan(path)


def test_payload_length_mismatch(tmp_path):
    path = tmp_path / "a.fscn"
    header = scan_io._HEADER.pack(b"FSCN", 2, 4, np.float32(45.0), 0.0,
                                  np.float32(1.0))
    path.write_bytes(header + b"\x00" * 10)
    with pytest.raises(DimensionMismatch):
        scan_io.read_scan(path)


def test_intensity_normalized_by_max(tmp_path):
    rec = np.zeros((2, 2, 4), dtype="<f4")
    rec[:, :, 0] = 3.0
    rec[:, :, 3] = 50.0
    header = scan_io._HEADER.pack(b"FSCN", 2, 2, np.float32(45.0), 0.0,
                                  np.float32(100.0))
    path = tmp_path / "a.fscn"
    path.write_bytes(header + rec.tobytes())
    back = scan_io.read_scan(path)
    assert np.allclose(back.intensity, 0.5)


class TestOrderByVerticalAngle:
    def test_bijective_reassembly(self):
        from featsense.synth import ray_directions
        rows, cols, vfov = 8, 16, 40.0
        dirs = ray_directions(rows, cols, vfov)
        ranges = np.linspace(2.0, 6.0, rows * cols).reshape(rows, cols)
        pts = dirs * ranges[:, :, None]
        flat = pts.reshape(-1, 3)
        perm = np.random.default_rng(0).permutation(len(flat))
        scan = scan_io.order_by_vertical_angle(flat[perm], rows, cols, vfov)
        assert scan.valid.all()
        assert np.allclose(scan.points, pts)

    def test_single_point_middle_bin(self):
        scan = scan_io.order_by_vertical_angle(
            np.array([[5.0, 0.0, 0.0]]), rows=5, cols=4, vfov=90.0)
        row = np.argwhere(scan.valid)[0][0]
        assert row == 2

    def test_collision_keeps_nearer(self):
        pts = np.array([[3.0, 0, 0], [2.0, 0, 0]])
        scan = scan_io.order_by_vertical_angle(pts, rows=4, cols=4, vfov=90.0)
        assert scan.valid.sum() == 1
        r, c = np.argwhere(scan.valid)[0]
        assert np.allclose(scan.points[r, c], [2.0, 0, 0])

    def test_empty_cloud(self):
        with pytest.raises(EmptyCloud):
            scan_io.order_by_vertical_angle(np.zeros((0, 3)), 4, 4)

    def test_structured_scan_reassembles(self):
        from featsense.synth import box_room, simulate_scan
        scan = simulate_scan(box_room(), Pose.identity(), rows=8, cols=32,
                             vfov=30.0)
        back = scan_io.order_by_vertical_angle(
            scan.points[scan.valid], scan.rows, scan.cols, scan.vfov)
        assert np.array_equal(back.valid, scan.valid)
        assert np.allclose(back.points, scan.points)


class TestTrajectoryIo:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("")
        assert len(scan_io.read_trajectory(path)) == 0

    def test_identity_line(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("0.0 0 0 0 0 0 0 1\n")
        traj = scan_io.read_trajectory(path)
        assert len(traj) == 1
        p = traj.poses[0]
        assert p.timestamp == 0.0
        assert np.allclose(p.translation, 0)
        assert np.allclose(p.rotation, [0, 0, 0, 1])

    def test_random_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        traj = Trajectory()
        for i in range(100):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            traj.append(Pose(q, rng.uniform(-50, 50, 3), float(i) * 0.1))
        path = tmp_path / "t.txt"
        scan_io.write_trajectory(traj, path)
        back = scan_io.read_trajectory(path)
        assert len(back) == 100
        for a, b in zip(traj.poses, back.poses):
            assert abs(a.timestamp - b.timestamp) < 1e-9
            assert np.allclose(a.translation, b.translation, atol=1e-9)
            assert np.allclose(a.rotation, b.rotation, atol=1e-9)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("0.0 1 2 3\n")
        with pytest.raises(MalformedLine):
            scan_io.read_trajectory(path)

    def test_non_monotonic(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n")
        with pytest.raises(NonMonotonicTimestamps):
            scan_io.read_trajectory(path)


def test_pose_quaternion_invariant():
    with pytest.raises(ValueError):
        Pose(np.array([0.0, 0.0, 0.0, 1.1]), np.zeros(3))


def test_pose_compose_inverse():
    rng = np.random.default_rng(3)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    p = Pose(q, rng.normal(size=3))
    ident = p.compose(p.inverse())
    assert np.allclose(ident.translation, 0, atol=1e-12)
    assert np.allclose(ident.matrix(), np.eye(3), atol=1e-12)

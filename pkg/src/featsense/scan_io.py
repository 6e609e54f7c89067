"""Scan and trajectory data types plus the on-disk dataset formats.

Scan files are little-endian binary: magic ``FSCN``, u32 rows, u32 cols,
f32 vfov_deg, f64 timestamp, f32 max_intensity, followed by rows*cols
records of 4 float32 (x, y, z, intensity). Invalid returns are stored as
all-zero records so the grid structure survives the round trip.

Trajectory files are TUM-style text: ``timestamp tx ty tz qx qy qz qw``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from featsense import geometry
from featsense.errors import (
    DimensionMismatch,
    EmptyCloud,
    MalformedFile,
    MalformedLine,
    NonMonotonicTimestamps,
)

_HEADER = struct.Struct("<4sIIfdf")
_MAGIC = b"FSCN"


@dataclass
class StructuredScan:
    """P x R grid of LiDAR returns in the sensor frame.

    ``points`` is (rows, cols, 3) float64 meters, ``intensity`` (rows, cols)
    in [0, 1], ``valid`` (rows, cols) bool. Row 0 is the lowest elevation
    scan line; columns sweep azimuth and wrap.
    """

    rows: int
    cols: int
    points: np.ndarray
    intensity: np.ndarray
    valid: np.ndarray
    timestamp: float = 0.0
    vfov: float = 45.0

    def __post_init__(self):
        if self.rows < 2:
            raise ValueError("scan needs at least 2 scan lines")
        for name in ("points", "intensity", "valid"):
            a = getattr(self, name)
            if a.shape[:2] != (self.rows, self.cols):
                raise DimensionMismatch(f"{name} grid is {a.shape[:2]}, "
                                        f"expected {(self.rows, self.cols)}")

    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=2)

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]


@dataclass
class Pose:
    """SE(3) transform: x_world = R @ x_sensor + t."""

    rotation: np.ndarray  # unit quaternion (x, y, z, w)
    translation: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        n = np.linalg.norm(self.rotation)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {n} is not 1")

    @staticmethod
    def identity(timestamp: float = 0.0) -> "Pose":
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3), timestamp)

    @staticmethod
    def from_matrix(R, t, timestamp: float = 0.0) -> "Pose":
        return Pose(geometry.matrix_to_quat(R), np.asarray(t, dtype=np.float64),
                    timestamp)

    def matrix(self) -> np.ndarray:
        return geometry.quat_to_matrix(self.rotation)

    def compose(self, other: "Pose", timestamp: float | None = None) -> "Pose":
        """self ∘ other (apply ``other`` first, then ``self``)."""
        q = geometry.quat_normalize(geometry.quat_mul(self.rotation, other.rotation))
        t = self.matrix() @ other.translation + self.translation
        ts = self.timestamp if timestamp is None else timestamp
        return Pose(q, t, ts)

    def inverse(self) -> "Pose":
        q = geometry.quat_conj(self.rotation)
        R_inv = geometry.quat_to_matrix(q)
        return Pose(geometry.quat_normalize(q), -(R_inv @ self.translation),
                    self.timestamp)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.matrix().T + self.translation


@dataclass
class Trajectory:
    poses: list = field(default_factory=list)

    def __post_init__(self):
        ts = [p.timestamp for p in self.poses]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise NonMonotonicTimestamps("timestamps must strictly increase")

    def append(self, pose: Pose):
        if self.poses and pose.timestamp <= self.poses[-1].timestamp:
            raise NonMonotonicTimestamps(
                f"{pose.timestamp} not after {self.poses[-1].timestamp}")
        self.poses.append(pose)

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def timestamps(self) -> np.ndarray:
        return np.array([p.timestamp for p in self.poses])


def read_scan(path) -> StructuredScan:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise MalformedFile(f"{path}: truncated header")
    magic, rows, cols, vfov, timestamp, max_intensity = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise MalformedFile(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + rows * cols * 16
    if len(raw) != expected:
        raise DimensionMismatch(
            f"{path}: payload is {len(raw) - _HEADER.size} bytes, "
            f"header implies {rows}x{cols} ({expected - _HEADER.size})")
    rec = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    rec = rec.reshape(rows, cols, 4).astype(np.float64)
    points = rec[:, :, :3].copy()
    intensity = rec[:, :, 3].copy()
    if max_intensity > 0:
        intensity /= max_intensity
    finite = np.isfinite(points).all(axis=2) & np.isfinite(intensity)
    rng = np.where(finite, np.linalg.norm(np.nan_to_num(points), axis=2), 0.0)
    valid = finite & (rng > 0.0)
    points[~valid] = 0.0
    intensity[~valid] = 0.0
    intensity = np.clip(intensity, 0.0, 1.0)
    return StructuredScan(rows, cols, points, intensity, valid,
                          timestamp=timestamp, vfov=float(vfov))


def write_scan(scan: StructuredScan, path) -> None:
    rec = np.zeros((scan.rows, scan.cols, 4), dtype="<f4")
    rec[:, :, :3] = np.where(scan.valid[:, :, None], scan.points, 0.0)
    rec[:, :, 3] = np.where(scan.valid, scan.intensity, 0.0)
    header = _HEADER.pack(_MAGIC, scan.rows, scan.cols, np.float32(scan.vfov),
                          scan.timestamp, np.float32(1.0))
    with open(path, "wb") as f:
        f.write(header)
        f.write(rec.tobytes())


def order_by_vertical_angle(cloud: np.ndarray, rows: int, cols: int,
                            vfov: float = 90.0,
                            intensities: np.ndarray | None = None,
                            timestamp: float = 0.0) -> StructuredScan:
    """Rebuild a structured grid from an unordered point list.

    Points are binned by elevation angle into ``rows`` scan lines over the
    symmetric vertical field of view and by azimuth into ``cols`` columns;
    bin collisions keep the nearer point.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if cloud.shape[0] == 0:
        raise EmptyCloud("no points to order")
    if rows * cols < cloud.shape[0]:
        raise DimensionMismatch("grid smaller than cloud")
    if intensities is None:
        intensities = np.zeros(cloud.shape[0])
    rng = np.linalg.norm(cloud, axis=1)
    ok = rng > 0
    elev = np.degrees(np.arctan2(cloud[:, 2], np.hypot(cloud[:, 0], cloud[:, 1])))
    az = np.arctan2(cloud[:, 1], cloud[:, 0])
    r_idx = np.clip(((elev + vfov / 2) / vfov * rows).astype(int), 0, rows - 1)
    c_idx = ((az + np.pi) / (2 * np.pi) * cols).astype(int) % cols

    points = np.zeros((rows, cols, 3))
    intensity = np.zeros((rows, cols))
    valid = np.zeros((rows, cols), dtype=bool)
    best = np.full((rows, cols), np.inf)
    for i in np.flatnonzero(ok):
        r, c = r_idx[i], c_idx[i]
        if rng[i] < best[r, c]:
            best[r, c] = rng[i]
            points[r, c] = cloud[i]
            intensity[r, c] = intensities[i]
            valid[r, c] = True
    return StructuredScan(rows, cols, points, intensity, valid,
                          timestamp=timestamp, vfov=vfov)


def read_trajectory(path) -> Trajectory:
    traj = Trajectory()
    with open(path, "r") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise MalformedLine(f"{path}:{lineno}: expected 8 fields, "
                                    f"got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise MalformedLine(f"{path}:{lineno}: {e}") from None
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            q = np.array([qx, qy, qz, qw])
            n = np.linalg.norm(q)
            if not 0.5 < n < 2.0:
                raise MalformedLine(f"{path}:{lineno}: quaternion norm {n}")
            traj.append(Pose(q / n, np.array([tx, ty, tz]), ts))
    return traj


def write_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w") as f:
        for p in traj.poses:
            t, q = p.translation, p.rotation
            f.write(f"{p.timestamp:.12g} {t[0]:.12g} {t[1]:.12g} {t[2]:.12g} "
                    f"{q[0]:.12g} {q[1]:.12g} {q[2]:.12g} {q[3]:.12g}\n")

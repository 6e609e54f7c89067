"""Synthetic spinning-LiDAR simulator over analytic scenes.

Scenes are lists of planes, axis-aligned boxes and vertical cylinders with
per-primitive base intensity; returned intensity is base * cos(incidence).
Ray directions sample elevation/azimuth bin centers so a simulated scan is
exactly consistent with elevation-angle reordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from featsense.scan_io import Pose, StructuredScan, Trajectory, write_scan, \
    write_trajectory

_EPS = 1e-9


@dataclass
class Plane:
    """Infinite plane n . x = d."""
    normal: np.ndarray
    d: float
    intensity: float = 0.5

    def intersect(self, origin, dirs):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.d - origin @ n) / denom
        hit = (np.abs(denom) > _EPS) & (t > _EPS)
        t = np.where(hit, t, np.inf)
        return t, np.abs(denom)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    intensity: float = 0.5

    def intersect(self, origin, dirs):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tnear = np.nanmax(tmin, axis=1)
        tfar = np.nanmin(tmax, axis=1)
        hit = (tnear <= tfar) & (tnear > _EPS)
        t = np.where(hit, tnear, np.inf)
        axis = np.argmax(np.where(np.isfinite(tmin), tmin, -np.inf), axis=1)
        cos = np.abs(dirs[np.arange(len(dirs)), axis])
        return t, cos


@dataclass
class Cylinder:
    """Vertical cylinder: axis through (cx, cy), z in [z0, z1]."""
    cx: float
    cy: float
    radius: float
    z0: float
    z1: float
    intensity: float = 0.5

    def intersect(self, origin, dirs):
        ox, oy = origin[0] - self.cx, origin[1] - self.cy
        dx, dy = dirs[:, 0], dirs[:, 1]
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - self.radius ** 2
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > _EPS)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (-b - sq) / (2 * a)
        z = origin[2] + t * dirs[:, 2]
        hit = ok & (t > _EPS) & (z >= self.z0) & (z <= self.z1)
        t = np.where(hit, t, np.inf)
        with np.errstate(invalid="ignore"):
            px = origin[0] + np.where(hit, t, 0.0) * dx - self.cx
            py = origin[1] + np.where(hit, t, 0.0) * dy - self.cy
            cos = np.abs((dx * px + dy * py) / self.radius)
        return t, np.where(hit, cos, 0.0)


@dataclass
class Scene:
    primitives: list = field(default_factory=list)

    @staticmethod
    def from_text(text: str) -> "Scene":
        scene = Scene()
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            kind, *vals = line.split()
            vals = [float(v) for v in vals]
            if kind == "plane":
                scene.primitives.append(
                    Plane(np.array(vals[:3]), vals[3], vals[4]))
            elif kind == "box":
                scene.primitives.append(
                    Box(np.array(vals[:3]), np.array(vals[3:6]), vals[6]))
            elif kind == "cylinder":
                scene.primitives.append(Cylinder(*vals))
            else:
                raise ValueError(f"unknown primitive {kind!r}")
        return scene

    @staticmethod
    def load(path) -> "Scene":
        return Scene.from_text(Path(path).read_text())


def ray_directions(rows: int, cols: int, vfov: float) -> np.ndarray:
    """Sensor-frame unit directions at elevation/azimuth bin centers,
    shaped (rows, cols, 3); row 0 is the lowest scan line."""
    elev = np.radians(-vfov / 2 + (np.arange(rows) + 0.5) * vfov / rows)
    az = -np.pi + (np.arange(cols) + 0.5) * 2 * np.pi / cols
    ce, se = np.cos(elev)[:, None], np.sin(elev)[:, None]
    d = np.empty((rows, cols, 3))
    d[:, :, 0] = ce * np.cos(az)[None, :]
    d[:, :, 1] = ce * np.sin(az)[None, :]
    d[:, :, 2] = se
    return d


def simulate_scan(scene: Scene, pose: Pose, rows: int = 32, cols: int = 256,
                  vfov: float = 45.0, max_range: float = 80.0,
                  noise_sigma: float = 0.0,
                  rng: np.random.Generator | None = None) -> StructuredScan:
    if rows < 2:
        raise ValueError("need at least 2 scan lines")
    if not 0 < vfov < 180:
        raise ValueError("vfov out of range")
    dirs_sensor = ray_directions(rows, cols, vfov).reshape(-1, 3)
    R = pose.matrix()
    dirs_world = dirs_sensor @ R.T
    origin = pose.translation

    best_t = np.full(len(dirs_world), np.inf)
    best_int = np.zeros(len(dirs_world))
    for prim in scene.primitives:
        t, cos = prim.intersect(origin, dirs_world)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_int = np.where(closer, np.clip(prim.intensity * cos, 0, 1),
                            best_int)

    valid = np.isfinite(best_t) & (best_t <= max_range)
    rngs = np.where(valid, best_t, 0.0)
    if noise_sigma > 0:
        rng = rng or np.random.default_rng(0)
        rngs = rngs + np.where(valid, rng.normal(0, noise_sigma, len(rngs)),
                               0.0)
        valid &= rngs > 0
    points = dirs_sensor * rngs[:, None]
    points[~valid] = 0.0
    intensity = np.where(valid, best_int, 0.0)
    return StructuredScan(rows, cols, points.reshape(rows, cols, 3),
                          intensity.reshape(rows, cols),
                          valid.reshape(rows, cols),
                          timestamp=pose.timestamp, vfov=vfov)


def make_dataset(scene: Scene, trajectory: Trajectory, out_dir,
                 rows: int = 32, cols: int = 256, vfov: float = 45.0,
                 max_range: float = 80.0, noise_sigma: float = 0.0,
                 seed: int = 0) -> list:
    """Write FSCN frames and the ground-truth trajectory; deterministic."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i, pose in enumerate(trajectory.poses):
        scan = simulate_scan(scene, pose, rows, cols, vfov, max_range,
                             noise_sigma, rng)
        path = out_dir / f"frame_{i:06d}.fscn"
        write_scan(scan, path)
        paths.append(path)
    write_trajectory(trajectory, out_dir / "groundtruth.txt")
    return paths


def box_room(size: float = 10.0, height: float = 4.0) -> Scene:
    """Closed rectangular room around the origin with varied wall intensity."""
    s = size / 2
    return Scene([
        Plane(np.array([1.0, 0, 0]), -s, 0.8),
        Plane(np.array([1.0, 0, 0]), s, 0.4),
        Plane(np.array([0, 1.0, 0]), -s, 0.6),
        Plane(np.array([0, 1.0, 0]), s, 0.9),
        Plane(np.array([0, 0, 1.0]), -height / 2, 0.5),
        Plane(np.array([0, 0, 1.0]), height / 2, 0.7),
    ])


def corridor(length: float = 30.0, width: float = 4.0,
             height: float = 3.0) -> Scene:
    """Corridor along +x, origin on the floor centerline."""
    scene = Scene([
        Plane(np.array([0, 1.0, 0]), -width / 2, 0.4),
        Plane(np.array([0, 1.0, 0]), width / 2, 0.8),
        Plane(np.array([0, 0, 1.0]), 0.0, 0.5),
        Plane(np.array([0, 0, 1.0]), height, 0.6),
        Plane(np.array([1.0, 0, 0]), -2.0, 0.7),
        Plane(np.array([1.0, 0, 0]), length, 0.9),
    ])
    # door frames give the odometry distinct edges along the way; header
    # beams across the ceiling anchor the vertical direction
    for x in np.arange(4.0, length, 6.0):
        scene.primitives.append(
            Box(np.array([x, -width / 2, 0.0]),
                np.array([x + 0.3, -width / 2 + 0.4, height]), 0.95))
        scene.primitives.append(
            Box(np.array([x + 3.0, width / 2 - 0.4, 0.0]),
                np.array([x + 3.3, width / 2, height]), 0.2))
        scene.primitives.append(
            Box(np.array([x, -width / 2, height - 0.4]),
                np.array([x + 0.3, width / 2, height]), 0.85))
    return scene


def pole_forest(n: int = 12, extent: float = 12.0, seed: int = 3) -> Scene:
    """Poles in front of a dim backdrop wall; pole silhouettes are the only
    true intensity edges."""
    rng = np.random.default_rng(seed)
    scene = Scene([Plane(np.array([1.0, 0, 0]), extent, 0.3)])
    for _ in range(n):
        x = rng.uniform(extent * 0.3, extent * 0.8)
        y = rng.uniform(-extent / 3, extent / 3)
        scene.primitives.append(Cylinder(x, y, 0.3, -2.0, 4.0, 0.95))
    return scene

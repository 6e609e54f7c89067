"""Chunked truncated signed distance field: per-scan candidate volumes by
ray marching with vertical interpolation, weighted averaging into the
global local map, chunk-aligned map shifting with disk persistence, and
zero-crossing export.

Cells are packed 32-bit (value mm as int16, weight as uint16) words; the
sign convention is positive in front of the surface (sensor side).
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from featsense import voxel
from featsense._march import march
from featsense.errors import (
    DegenerateDirection,
    GeometryMismatch,
    StoreIo,
)
from featsense.scan_io import Pose, StructuredScan


@dataclass
class TsdfParams:
    tau: float = 0.6
    weight_unit: int = 64
    weight_max: int = 1024
    behind_factor: float = 0.5


@dataclass(frozen=True)
class GridGeometry:
    """Chunk-aligned dense voxel window. origin_voxel is the global voxel
    index of local cell (0,0,0); both it and dims are chunk multiples."""

    origin_voxel: tuple
    dims: tuple
    voxel_size: float
    tau: float
    chunk_size: int = 64

    def __post_init__(self):
        if self.voxel_size <= 0 or any(d <= 0 for d in self.dims):
            raise ValueError("voxel_size and dims must be positive")
        if self.tau < 2 * self.voxel_size:
            raise ValueError("tau must be at least two voxels")
        if any(d % self.chunk_size for d in self.dims) \
                or any(o % self.chunk_size for o in self.origin_voxel):
            raise ValueError("origin and dims must be chunk aligned")

    @staticmethod
    def centered(center, size_m, voxel_size: float, tau: float,
                 chunk_size: int = 64) -> "GridGeometry":
        """Smallest chunk-aligned window of at least size_m around center."""
        center = np.asarray(center, dtype=np.float64)
        size_m = np.broadcast_to(np.asarray(size_m, dtype=np.float64), 3)
        n = np.ceil(size_m / voxel_size / chunk_size).astype(int) * chunk_size
        ov = (np.floor((center / voxel_size - n / 2)
                       / chunk_size) * chunk_size).astype(int)
        return GridGeometry(tuple(int(v) for v in ov), tuple(int(v) for v in n),
                            voxel_size, tau, chunk_size)

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.origin_voxel, dtype=np.float64) * self.voxel_size

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    def center(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.voxel_size / 2.0

    def same_grid(self, other: "GridGeometry") -> bool:
        return (self.origin_voxel == other.origin_voxel
                and self.dims == other.dims
                and self.voxel_size == other.voxel_size
                and self.tau == other.tau)


class TsdfVolume:
    """Dense packed-cell volume over a GridGeometry."""

    def __init__(self, geom: GridGeometry, weight_max: int = 1024,
                 cells: np.ndarray | None = None):
        self.geom = geom
        self.weight_max = int(weight_max)
        if cells is None:
            cells = np.zeros(geom.n_cells, dtype=np.uint32)
        self.cells = cells

    def values_mm(self) -> np.ndarray:
        v, _ = voxel.unpack(self.cells)
        return v.reshape(self.geom.dims)

    def weights(self) -> np.ndarray:
        _, w = voxel.unpack(self.cells)
        return w.reshape(self.geom.dims)

    def observed(self) -> np.ndarray:
        return self.weights() > 0

    def copy(self) -> "TsdfVolume":
        return type(self)(self.geom, self.weight_max, self.cells.copy())


class CandidateVolume(TsdfVolume):
    """Per-scan min-combined candidate (value, weight) grid."""


@dataclass
class GenerateStats:
    n_rays: int = 0
    skipped_samples: int = 0


def interpolation_vector(d, up) -> np.ndarray:
    """Normalized d x (d x up): orthogonal to d, in the d-up plane."""
    d = np.asarray(d, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    v = np.cross(d, np.cross(d, up))
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise DegenerateDirection("ray direction parallel to up vector")
    return v / n


def vertical_extent(length: float, vfov: float, hlines: int) -> float:
    """Triangle half-height at ray distance ``length`` between scan lines."""
    if hlines < 2:
        raise ValueError("need at least two scan lines")
    if not 0 < vfov < 180:
        raise ValueError("vfov must be in (0, 180) degrees")
    return np.tan(np.radians(vfov / hlines)) * length


def generate_candidate(scan: StructuredScan, pose: Pose, geom: GridGeometry,
                       params: TsdfParams | None = None,
                       workers: int = 1) -> tuple[CandidateVolume, GenerateStats]:
    """Ray-march every valid return into a candidate volume.

    With workers > 1, rays are partitioned into contiguous blocks marched
    into private volumes (the kernel releases the GIL), then folded with
    the min-combine total order — bit-identical to the sequential result.
    """
    params = params or TsdfParams()
    cand = CandidateVolume(geom, params.weight_max)
    pts = pose.transform(scan.valid_points())
    stats = GenerateStats(n_rays=len(pts))
    if len(pts) == 0:
        return cand, stats

    sensor = pose.translation.astype(np.float64)
    diff = pts - sensor
    dists = np.linalg.norm(diff, axis=1)
    keep = dists > 0
    diff, dists = diff[keep], dists[keep]
    dirs = diff / dists[:, None]
    up = pose.matrix() @ np.array([0.0, 0.0, 1.0])
    ivecs = np.cross(dirs, np.cross(dirs, up))
    norms = np.linalg.norm(ivecs, axis=1)
    ivalid = norms > 1e-12
    ivecs = np.where(ivalid[:, None], ivecs / np.where(ivalid, norms, 1.0)[:, None],
                     0.0)
    delta_z = np.tan(np.radians(scan.vfov / scan.rows))
    origin = geom.origin
    dims = np.asarray(geom.dims, dtype=np.int64)

    def run_block(sl, words):
        return march(words, sensor, dirs[sl], dists[sl], ivecs[sl], ivalid[sl],
                     origin, dims, geom.voxel_size, params.tau,
                     params.behind_factor, params.weight_unit, delta_z)

    workers = max(1, int(workers))
    if workers == 1:
        stats.skipped_samples = run_block(slice(None), cand.cells)
        return cand, stats

    bounds = np.linspace(0, len(dists), workers + 1).astype(int)
    blocks = [np.zeros(geom.n_cells, dtype=np.uint32) for _ in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(run_block, slice(lo, hi), blk)
                for lo, hi, blk in zip(bounds[:-1], bounds[1:], blocks)]
        stats.skipped_samples = sum(f.result() for f in futs)
    merged = blocks[0]
    for blk in blocks[1:]:
        merged = voxel.merge_packed(merged, blk)
    cand.cells = merged
    return cand, stats


def _round_div_away(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Round-half-away-from-zero integer division, den > 0."""
    absn = np.abs(num)
    q = (2 * absn + den) // (2 * den)
    return np.where(num < 0, -q, q)


def integrate(global_vol: TsdfVolume, cand: TsdfVolume) -> None:
    """Weighted-average every observed candidate cell into the global map."""
    if not global_vol.geom.same_grid(cand.geom):
        raise GeometryMismatch("candidate grid differs from global grid")
    gv, gw = voxel.unpack(global_vol.cells)
    cv, cw = voxel.unpack(cand.cells)
    m = cw > 0
    if not m.any():
        return
    gv64, gw64 = gv[m].astype(np.int64), gw[m].astype(np.int64)
    cv64, cw64 = cv[m].astype(np.int64), cw[m].astype(np.int64)
    den = gw64 + cw64
    num = gv64 * gw64 + cv64 * cw64
    new_v = _round_div_away(num, den).astype(np.int16)
    new_w = np.minimum(den, global_vol.weight_max).astype(np.uint16)
    global_vol.cells[m] = voxel.pack(new_v, new_w)


_STORE_HEADER = struct.Struct("<4sffIII")
_STORE_ENTRY = struct.Struct("<iiiQ")
_STORE_MAGIC = b"FTSD"


class MapStore:
    """Single-file chunk store: magic, header, chunk index, packed blobs.

    Chunks live in memory while open; flush() rewrites the file.
    """

    def __init__(self, path, voxel_size: float, tau: float,
                 chunk_size: int = 64, weight_max: int = 1024):
        self.path = path
        self.voxel_size = float(voxel_size)
        self.tau = float(tau)
        self.chunk_size = int(chunk_size)
        self.weight_max = int(weight_max)
        self.chunks: dict = {}

    @classmethod
    def open(cls, path) -> "MapStore":
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except OSError as e:
            raise StoreIo(str(e)) from None
        if len(raw) < _STORE_HEADER.size:
            raise StoreIo(f"{path}: truncated header")
        magic, vs, tau, cs, wmax, n = _STORE_HEADER.unpack_from(raw)
        if magic != _STORE_MAGIC:
            raise StoreIo(f"{path}: bad magic {magic!r}")
        store = cls(path, vs, tau, cs, wmax)
        n_cells = cs ** 3
        off = _STORE_HEADER.size
        for _ in range(n):
            cx, cy, cz, blob_off = _STORE_ENTRY.unpack_from(raw, off)
            off += _STORE_ENTRY.size
            end = blob_off + n_cells * 4
            if end > len(raw):
                raise StoreIo(f"{path}: chunk ({cx},{cy},{cz}) out of range")
            blob = np.frombuffer(raw, dtype="<u4", count=n_cells,
                                 offset=blob_off)
            store.chunks[(cx, cy, cz)] = blob.reshape(cs, cs, cs).copy()
        return store

    def put(self, coord, block: np.ndarray) -> None:
        cs = self.chunk_size
        assert block.shape == (cs, cs, cs)
        self.chunks[tuple(int(c) for c in coord)] = \
            np.ascontiguousarray(block, dtype=np.uint32)

    def get(self, coord):
        return self.chunks.get(tuple(int(c) for c in coord))

    def flush(self) -> None:
        coords = sorted(self.chunks)
        n_cells = self.chunk_size ** 3
        base = _STORE_HEADER.size + len(coords) * _STORE_ENTRY.size
        try:
            with open(self.path, "wb") as f:
                f.write(_STORE_HEADER.pack(_STORE_MAGIC,
                                           np.float32(self.voxel_size),
                                           np.float32(self.tau),
                                           self.chunk_size, self.weight_max,
                                           len(coords)))
                for i, c in enumerate(coords):
                    f.write(_STORE_ENTRY.pack(*c, base + i * n_cells * 4))
                for c in coords:
                    f.write(self.chunks[c].astype("<u4").tobytes())
        except OSError as e:
            raise StoreIo(str(e)) from None

    def bounding_volume(self, weight_max: int | None = None) -> TsdfVolume:
        """Assemble every stored chunk into one dense volume."""
        if not self.chunks:
            geom = GridGeometry((0, 0, 0),
                                (self.chunk_size,) * 3,
                                self.voxel_size, self.tau, self.chunk_size)
            return TsdfVolume(geom, weight_max or self.weight_max)
        cs = self.chunk_size
        coords = np.array(sorted(self.chunks))
        lo, hi = coords.min(axis=0), coords.max(axis=0) + 1
        geom = GridGeometry(tuple(int(v) for v in lo * cs),
                            tuple(int(v) for v in (hi - lo) * cs),
                            self.voxel_size, self.tau, cs)
        vol = TsdfVolume(geom, weight_max or self.weight_max)
        grid = vol.cells.reshape(geom.dims)
        for (cx, cy, cz), block in self.chunks.items():
            ox, oy, oz = (np.array([cx, cy, cz]) - lo) * cs
            grid[ox:ox + cs, oy:oy + cs, oz:oz + cs] = block
        return vol


def _desired_origin(geom: GridGeometry, new_center) -> np.ndarray:
    new_center = np.asarray(new_center, dtype=np.float64)
    dims = np.asarray(geom.dims)
    cs = geom.chunk_size
    return (np.floor((new_center / geom.voxel_size - dims / 2) / cs)
            * cs).astype(int)


def shift_local_map(vol: TsdfVolume, new_center, store: MapStore) -> None:
    """Move the window by whole chunks toward new_center.

    Evicted chunks are persisted to the store, entering chunks loaded if
    present; overlapping cells keep their values exactly.
    """
    geom = vol.geom
    desired = _desired_origin(geom, new_center)
    old_ov = np.asarray(geom.origin_voxel)
    if np.array_equal(desired, old_ov):
        return
    cs = geom.chunk_size
    dims = np.asarray(geom.dims)
    delta = desired - old_ov

    old_grid = vol.cells.reshape(geom.dims)
    new_grid = np.zeros(geom.dims, dtype=np.uint32)

    # evict old chunks that leave the new window
    nc = dims // cs
    new_lo, new_hi = desired // cs, desired // cs + nc
    for ci in range(nc[0]):
        for cj in range(nc[1]):
            for ck in range(nc[2]):
                gc = old_ov // cs + (ci, cj, ck)
                if np.all(gc >= new_lo) and np.all(gc < new_hi):
                    continue
                block = old_grid[ci * cs:(ci + 1) * cs,
                                 cj * cs:(cj + 1) * cs,
                                 ck * cs:(ck + 1) * cs]
                if block.any():
                    store.put(tuple(gc), block)

    # copy the overlapping region
    n_lo = np.maximum(0, -delta)
    n_hi = np.minimum(dims, dims - delta)
    if np.all(n_hi > n_lo):
        o_lo, o_hi = n_lo + delta, n_hi + delta
        new_grid[n_lo[0]:n_hi[0], n_lo[1]:n_hi[1], n_lo[2]:n_hi[2]] = \
            old_grid[o_lo[0]:o_hi[0], o_lo[1]:o_hi[1], o_lo[2]:o_hi[2]]

    # load chunks entering the window
    old_lo, old_hi = old_ov // cs, old_ov // cs + nc
    for ci in range(nc[0]):
        for cj in range(nc[1]):
            for ck in range(nc[2]):
                gc = new_lo + (ci, cj, ck)
                if np.all(gc >= old_lo) and np.all(gc < old_hi):
                    continue
                block = store.get(tuple(gc))
                if block is not None:
                    new_grid[ci * cs:(ci + 1) * cs,
                             cj * cs:(cj + 1) * cs,
                             ck * cs:(ck + 1) * cs] = block

    vol.geom = GridGeometry(tuple(int(v) for v in desired), geom.dims,
                            geom.voxel_size, geom.tau, cs)
    vol.cells = new_grid.reshape(-1)


def store_volume(vol: TsdfVolume, store: MapStore) -> None:
    """Persist every non-empty chunk of the current window."""
    cs = vol.geom.chunk_size
    dims = np.asarray(vol.geom.dims)
    grid = vol.cells.reshape(vol.geom.dims)
    nc = dims // cs
    base = np.asarray(vol.geom.origin_voxel) // cs
    for ci in range(nc[0]):
        for cj in range(nc[1]):
            for ck in range(nc[2]):
                block = grid[ci * cs:(ci + 1) * cs,
                             cj * cs:(cj + 1) * cs,
                             ck * cs:(ck + 1) * cs]
                if block.any():
                    store.put(tuple(base + (ci, cj, ck)), block)


def export_zero_crossings(vol: TsdfVolume) -> np.ndarray:
    """World-space points where axis-aligned neighbor cells change sign."""
    v = vol.values_mm().astype(np.float64)
    obs = vol.observed()
    origin = vol.geom.origin
    vs = vol.geom.voxel_size
    out = []
    for axis in range(3):
        s1 = [slice(None)] * 3
        s2 = [slice(None)] * 3
        s1[axis] = slice(None, -1)
        s2[axis] = slice(1, None)
        s1, s2 = tuple(s1), tuple(s2)
        v1, v2 = v[s1], v[s2]
        m = obs[s1] & obs[s2] & (v1 * v2 < 0)
        if not m.any():
            continue
        idx = np.argwhere(m).astype(np.float64)
        frac = (v1[m] / (v1[m] - v2[m]))
        centers = origin + (idx + 0.5) * vs
        step = np.zeros(3)
        step[axis] = vs
        out.append(centers + frac[:, None] * step)
    if not out:
        return np.zeros((0, 3))
    return np.vstack(out)


def write_ply(points: np.ndarray, path) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n"
                f"element vertex {len(points)}\n"
                "property float x\nproperty float y\nproperty float z\n"
                "end_header\n")
        for p in points:
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")

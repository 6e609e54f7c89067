"""Ray-marching kernels filling a per-scan candidate volume.

Two implementations with bit-identical output: a numba @njit(nogil=True)
loop (hot path, releases the GIL so worker threads overlap) and a
vectorized numpy fallback. featsense.backend picks one at import time.

Both march each ray only inside the truncation band
[max(0, D - tau), D + tau * behind_factor] in voxel_size steps, widen
vertically by ceil(delta_z * l / voxel_size) voxels along the
interpolation vector, and min-combine samples per the voxel total order.
"""

from __future__ import annotations

import numpy as np

from featsense import voxel
from featsense.backend import USE_NUMBA

_EMPTY_KEY = np.uint64(0xFFFFFFFFFFFFFFFF)


def _sample_key(value: np.ndarray, weight: np.ndarray) -> np.ndarray:
    v = value.astype(np.int64)
    w = weight.astype(np.uint64)
    key = (np.abs(v).astype(np.uint64) << np.uint64(32)) \
        | ((np.uint64(0xFFFF) ^ w) << np.uint64(16)) \
        | (v >= 0).astype(np.uint64)
    return np.where(weight == 0, _EMPTY_KEY, key)


def key_grid_from_words(words: np.ndarray) -> np.ndarray:
    return voxel.order_key(words)


def words_from_key_grid(keys: np.ndarray) -> np.ndarray:
    empty = keys == _EMPTY_KEY
    absv = ((keys >> np.uint64(32)) & np.uint64(0x7FFFFFFF)).astype(np.int64)
    sign = (keys & np.uint64(1)).astype(bool)
    v = np.where(sign, absv, -absv).astype(np.int16)
    w = (np.uint64(0xFFFF) ^ ((keys >> np.uint64(16)) & np.uint64(0xFFFF)))
    w = w.astype(np.uint16)
    words = voxel.pack(v, w)
    return np.where(empty, np.uint32(0), words)


def _rha(x):
    """Round half away from zero."""
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def march_numpy(words, sensor, dirs, dists, ivecs, ivalid, origin, dims,
                vs, tau, behind_factor, weight_unit, delta_z,
                chunk: int = 4096) -> int:
    nx, ny, nz = int(dims[0]), int(dims[1]), int(dims[2])
    keys = key_grid_from_words(words)
    skipped = 0
    for lo in range(0, len(dists), chunk):
        hi = min(lo + chunk, len(dists))
        D = dists[lo:hi]
        dr = dirs[lo:hi]
        iv = ivecs[lo:hi]
        ivd = ivalid[lo:hi]
        l_start = np.maximum(0.0, D - tau)
        l_end = D + tau * behind_factor
        n_steps = np.floor((l_end - l_start) / vs).astype(np.int64) + 1
        S = int(n_steps.max())
        k = np.arange(S, dtype=np.float64)
        l = l_start[:, None] + k * vs
        smask = np.arange(S) < n_steps[:, None]
        sd = D[:, None] - l
        value = _rha(np.clip(sd, -tau, tau) * 1000.0).astype(np.int16)
        w_behind = _rha(weight_unit * (1.0 - (l - D[:, None])
                                       / (tau * behind_factor)))
        w = np.where(l <= D[:, None], float(weight_unit), w_behind)
        smask &= w > 0
        w16 = np.clip(w, 0, 0xFFFF).astype(np.uint16)

        n_fill = np.ceil(delta_z * l / vs).astype(np.int64)
        n_fill[~ivd] = 0
        n_fill[~smask] = 0
        F = int(n_fill.max()) if n_fill.size else 0
        m = np.arange(-F, F + 1, dtype=np.float64)
        fmask = np.abs(m)[None, None, :] <= n_fill[:, :, None]
        pos = (sensor[None, None, None, :]
               + l[:, :, None, None] * dr[:, None, None, :]
               + (m * vs)[None, None, :, None] * iv[:, None, None, :])
        idx = np.floor((pos - origin[None, None, None, :]) / vs).astype(np.int64)
        inb = ((idx[..., 0] >= 0) & (idx[..., 0] < nx)
               & (idx[..., 1] >= 0) & (idx[..., 1] < ny)
               & (idx[..., 2] >= 0) & (idx[..., 2] < nz))
        wanted = smask[:, :, None] & fmask
        use = wanted & inb
        skipped += int(wanted.sum() - use.sum())
        if not use.any():
            continue
        flat = (idx[..., 0] * ny + idx[..., 1]) * nz + idx[..., 2]
        skey = _sample_key(value[:, :, None], w16[:, :, None])
        skey = np.broadcast_to(skey, use.shape)
        flat = np.where(use, flat, 0)
        np.minimum.at(keys, flat[use], skey[use])
    words[:] = words_from_key_grid(keys)
    return skipped


if USE_NUMBA:
    import numba

    @numba.njit(cache=True, nogil=True)
    def _march_jit(words, sensor, dirs, dists, ivecs, ivalid, origin,
                   nx, ny, nz, vs, tau, behind_factor, weight_unit, delta_z):
        skipped = 0
        for r in range(dists.shape[0]):
            D = dists[r]
            l_start = max(0.0, D - tau)
            l_end = D + tau * behind_factor
            n_steps = int(np.floor((l_end - l_start) / vs)) + 1
            for s in range(n_steps):
                l = l_start + s * vs
                sd = D - l
                if sd > tau:
                    sd = tau
                elif sd < -tau:
                    sd = -tau
                fval = sd * 1000.0
                if fval >= 0:
                    value = np.int16(np.floor(fval + 0.5))
                else:
                    value = np.int16(np.ceil(fval - 0.5))
                if l <= D:
                    weight = np.uint16(weight_unit)
                else:
                    fw = weight_unit * (1.0 - (l - D) / (tau * behind_factor))
                    fw = np.floor(fw + 0.5) if fw >= 0 else np.ceil(fw - 0.5)
                    if fw <= 0:
                        continue
                    weight = np.uint16(fw)
                n_fill = int(np.ceil(delta_z * l / vs)) if ivalid[r] else 0
                for mi in range(-n_fill, n_fill + 1):
                    mm = mi * vs
                    px = sensor[0] + l * dirs[r, 0] + mm * ivecs[r, 0]
                    py = sensor[1] + l * dirs[r, 1] + mm * ivecs[r, 1]
                    pz = sensor[2] + l * dirs[r, 2] + mm * ivecs[r, 2]
                    ix = int(np.floor((px - origin[0]) / vs))
                    iy = int(np.floor((py - origin[1]) / vs))
                    iz = int(np.floor((pz - origin[2]) / vs))
                    if ix < 0 or ix >= nx or iy < 0 or iy >= ny \
                            or iz < 0 or iz >= nz:
                        skipped += 1
                        continue
                    flat = (ix * ny + iy) * nz + iz
                    old = words[flat]
                    ov = np.int16(old >> np.uint32(16))
                    ow = np.uint16(old & np.uint32(0xFFFF))
                    # total order: |value| asc, weight desc, value asc
                    wins = False
                    if ow == 0:
                        wins = weight > 0
                    else:
                        av, ao = abs(np.int64(value)), abs(np.int64(ov))
                        if av != ao:
                            wins = av < ao
                        elif weight != ow:
                            wins = weight > ow
                        else:
                            wins = value < ov
                    if wins:
                        words[flat] = (np.uint32(np.uint16(value))
                                       << np.uint32(16)) | np.uint32(weight)
        return skipped

    def march(words, sensor, dirs, dists, ivecs, ivalid, origin, dims,
              vs, tau, behind_factor, weight_unit, delta_z) -> int:
        return int(_march_jit(words, sensor, dirs, dists, ivecs, ivalid,
                              origin, int(dims[0]), int(dims[1]), int(dims[2]),
                              vs, tau, behind_factor, float(weight_unit),
                              delta_z))
else:
    march = march_numpy

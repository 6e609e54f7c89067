"""Absolute trajectory error: timestamp association, optional rigid
alignment, and rmse/mean/std/min/max statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from featsense.errors import DegenerateGeometry, NoOverlap
from featsense.scan_io import Pose, Trajectory


@dataclass
class AteReport:
    rmse: float
    mean: float
    std: float
    min: float
    max: float
    n_pairs: int

    def as_text(self) -> str:
        rows = [("rmse", self.rmse), ("mean", self.mean), ("std", self.std),
                ("min", self.min), ("max", self.max)]
        lines = [f"{k:<6} {v:10.4f} m" for k, v in rows]
        lines.append(f"pairs  {self.n_pairs:10d}")
        return "\n".join(lines)

    def as_kv(self) -> str:
        return (f"rmse={self.rmse:.9g}\nmean={self.mean:.9g}\n"
                f"std={self.std:.9g}\nmin={self.min:.9g}\nmax={self.max:.9g}\n"
                f"n_pairs={self.n_pairs}\n")


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02):
    """Greedy nearest-timestamp pairing; each gt pose used at most once."""
    if len(est) == 0 or len(gt) == 0:
        raise NoOverlap("empty trajectory")
    gt_ts = gt.timestamps()
    used = np.zeros(len(gt), dtype=bool)
    pairs = []
    for ep in est.poses:
        dt = np.abs(gt_ts - ep.timestamp)
        dt[used] = np.inf
        j = int(np.argmin(dt))
        if dt[j] <= max_dt:
            used[j] = True
            pairs.append((ep, gt.poses[j]))
    if not pairs:
        raise NoOverlap(f"no pairs within {max_dt} s")
    return pairs


def align_umeyama(pairs) -> Pose:
    """Least-squares SE(3) (no scale) mapping estimated onto gt positions."""
    if len(pairs) < 3:
        raise DegenerateGeometry("need at least 3 pairs")
    est = np.array([p.translation for p, _ in pairs])
    gt = np.array([g.translation for _, g in pairs])
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    cov = (gt - mu_g).T @ (est - mu_e) / len(pairs)
    # collinear points leave the rotation about the line unconstrained
    svals = np.linalg.svd(cov, compute_uv=False)
    if svals[1] < 1e-12 * max(svals[0], 1e-300):
        raise DegenerateGeometry("points are collinear")
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_g - R @ mu_e
    return Pose.from_matrix(R, t)


def ate(pairs, aligned: bool = True) -> AteReport:
    if not pairs:
        raise NoOverlap("no pose pairs")
    T = align_umeyama(pairs) if aligned else Pose.identity()
    est = np.array([p.translation for p, _ in pairs])
    gt = np.array([g.translation for _, g in pairs])
    err = np.linalg.norm(est @ T.matrix().T + T.translation - gt, axis=1)
    mean = float(err.mean())
    return AteReport(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mean=mean,
        std=float(np.sqrt(np.mean((err - mean) ** 2))),
        min=float(err.min()),
        max=float(err.max()),
        n_pairs=len(err),
    )

"""Full pipeline wiring: features -> odometry -> refinement -> TSDF.

Offline mode (default) is fully synchronous and deterministic; realtime
mode runs the VGICP refinement on a background worker and applies the
correction when ready, conjugated through the incremental pose chain.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from featsense import image, tsdf
from featsense.config import PipelineConfig
from featsense.errors import Degenerate, MapEmpty
from featsense.features import FeatureParams, classify_features, \
    compute_curvature
from featsense.image import ImagePipelineParams, intensity_edge_mask
from featsense.odometry import FeatureMap, OdometryParams, predict_motion, \
    register_scan, update_feature_maps, voxel_downsample
from featsense.refine import RefineParams, RefineState, maybe_refine
from featsense.scan_io import Pose, Trajectory, read_scan, write_trajectory


@dataclass
class StageStats:
    samples: list = field(default_factory=list)

    def add(self, ms: float):
        self.samples.append(ms)

    def summary(self):
        if not self.samples:
            return {"min": 0.0, "max": 0.0, "avg": 0.0, "n": 0}
        a = np.asarray(self.samples)
        return {"min": float(a.min()), "max": float(a.max()),
                "avg": float(a.mean()), "n": len(a)}


@dataclass
class RunStats:
    stages: dict = field(default_factory=dict)
    frames: int = 0
    fallback_frames: int = 0
    refinements: int = 0
    skipped_samples: int = 0

    def stage(self, name) -> StageStats:
        return self.stages.setdefault(name, StageStats())

    def table(self) -> str:
        lines = [f"{'stage':<14} {'min ms':>8} {'max ms':>8} {'avg ms':>8}"]
        for name, st in self.stages.items():
            s = st.summary()
            lines.append(f"{name:<14} {s['min']:8.2f} {s['max']:8.2f} "
                         f"{s['avg']:8.2f}")
        lines.append(f"frames={self.frames} fallbacks={self.fallback_frames} "
                     f"refinements={self.refinements}")
        return "\n".join(lines)


def _params_from_config(cfg: PipelineConfig):
    img = ImagePipelineParams(cfg.gaussian_sigma, cfg.gaussian_ksize,
                              cfg.bilateral_sigma_space,
                              cfg.bilateral_sigma_range, cfg.bilateral_ksize,
                              cfg.sobel_threshold)
    feat = FeatureParams(cfg.half_window, cfg.n_subregions, cfg.edge_min,
                         cfg.edge_max, cfg.surf_max,
                         cfg.max_edges_per_subregion,
                         cfg.max_surf_per_subregion, cfg.suppress_radius,
                         cfg.parallel_angle_deg, cfg.occlusion_gap)
    odo = OdometryParams(corr_max_dist=cfg.corr_max_dist,
                         eig_ratio=cfg.eig_ratio,
                         plane_max_point_dist=cfg.plane_max_point_dist,
                         edge_half_len=cfg.edge_half_len,
                         huber_delta=cfg.huber_delta,
                         edge_min=cfg.edge_min, surf_max=cfg.surf_max,
                         weighting=cfg.weighting, leaf_edge=cfg.leaf_edge,
                         leaf_surf=cfg.leaf_surf,
                         local_radius=cfg.local_radius)
    ref = RefineParams(voxel_size=cfg.refine_voxel_size, knn=cfg.refine_knn,
                       trigger_distance=cfg.trigger_distance)
    vol = tsdf.TsdfParams(tau=cfg.tsdf_tau, weight_unit=cfg.tsdf_weight_unit,
                          weight_max=cfg.tsdf_weight_max,
                          behind_factor=cfg.tsdf_behind_factor)
    return img, feat, odo, ref, vol


def list_frames(dataset_dir) -> list:
    return sorted(Path(dataset_dir).glob("*.fscn"))


def run(cfg: PipelineConfig):
    """Process every frame in the dataset. Returns (Trajectory, RunStats);
    writes the trajectory file and the TSDF map store."""
    cfg.validate()
    img_p, feat_p, odo_p, ref_p, tsdf_p = _params_from_config(cfg)
    frames = list_frames(cfg.dataset_dir)
    stats = RunStats()
    traj = Trajectory()
    store = tsdf.MapStore(cfg.out_map, cfg.tsdf_voxel_size, cfg.tsdf_tau,
                          cfg.chunk_size, cfg.tsdf_weight_max)
    if not frames:
        store.flush()
        write_trajectory(traj, cfg.out_trajectory)
        return traj, stats

    geom = tsdf.GridGeometry.centered(
        np.zeros(3), (cfg.map_size_x, cfg.map_size_y, cfg.map_size_z),
        cfg.tsdf_voxel_size, cfg.tsdf_tau, cfg.chunk_size)
    volume = tsdf.TsdfVolume(geom, cfg.tsdf_weight_max)

    fmap = FeatureMap()
    pose = None
    prev_pose = prev2_pose = None
    state = RefineState(trigger_distance=cfg.trigger_distance,
                        realtime=cfg.realtime_budget_ms > 0)
    anchor = None  # epoch origin for the incremental refinement chain
    pool = ThreadPoolExecutor(max_workers=1) if state.realtime else None
    pending = None  # (future, pose at trigger)
    debug_dir = Path(cfg.debug_image_dir) if cfg.debug_image_dir else None
    if debug_dir:
        debug_dir.mkdir(parents=True, exist_ok=True)

    for i, path in enumerate(frames):
        scan = read_scan(path)

        t0 = time.perf_counter()
        mask = intensity_edge_mask(scan, img_p)
        curv = compute_curvature(scan, feat_p.half_window)
        feats = classify_features(scan, curv, mask, feat_p)
        stats.stage("pre-proc").add((time.perf_counter() - t0) * 1e3)
        if debug_dir:
            image.write_pgm(scan.intensity, debug_dir / f"{path.stem}_int.pgm")
            image.write_pgm(mask, debug_dir / f"{path.stem}_mask.pgm")

        t0 = time.perf_counter()
        if pose is None:
            pred = Pose.identity(scan.timestamp)
        elif prev2_pose is None:
            pred = Pose(pose.rotation, pose.translation, scan.timestamp)
        else:
            pred = predict_motion(pose, prev2_pose)
            pred = Pose(pred.rotation, pred.translation, scan.timestamp)
        try:
            new_pose = register_scan(feats, fmap, pred, cfg.opt_steps, odo_p)
        except (Degenerate, MapEmpty):
            new_pose = pred
            stats.fallback_frames += 1
        prev2_pose, prev_pose = pose, new_pose
        pose = Pose(new_pose.rotation, new_pose.translation, scan.timestamp)
        stats.stage("registration").add((time.perf_counter() - t0) * 1e3)

        fmap = update_feature_maps(fmap, feats, pose, cfg.leaf_edge,
                                   cfg.leaf_surf, cfg.local_radius)

        t0 = time.perf_counter()
        if cfg.refine_enabled:
            if anchor is None:
                anchor = pose
            moved = 0.0 if len(traj) == 0 else float(np.linalg.norm(
                pose.translation - traj.poses[-1].translation))
            pts = voxel_downsample(scan.valid_points(), cfg.refine_scan_leaf)
            state.add_scan(pts, anchor.inverse().compose(pose), moved)
            if state.realtime:
                pose, anchor = _poll_refinement(state, pose, anchor, pending,
                                                stats)
                pending = _maybe_submit(state, pose, ref_p, pool, pending)
            else:
                delta = maybe_refine(state, pose, ref_p)
                if delta is not None:
                    pose = pose.compose(delta, timestamp=pose.timestamp)
                    anchor = pose
                    stats.refinements += 1
        stats.stage("refinement").add((time.perf_counter() - t0) * 1e3)

        traj.append(pose)

        t0 = time.perf_counter()
        cand, gstats = tsdf.generate_candidate(scan, pose, volume.geom,
                                               tsdf_p, cfg.workers)
        tsdf.integrate(volume, cand)
        stats.skipped_samples += gstats.skipped_samples
        stats.stage("tsdf").add((time.perf_counter() - t0) * 1e3)

        t0 = time.perf_counter()
        tsdf.shift_local_map(volume, pose.translation, store)
        stats.stage("shift").add((time.perf_counter() - t0) * 1e3)
        stats.frames += 1

    if pool:
        pool.shutdown(wait=True)
    tsdf.store_volume(volume, store)
    store.flush()
    write_trajectory(traj, cfg.out_trajectory)
    return traj, stats


def _poll_refinement(state, pose, anchor, pending, stats):
    """Apply a finished background correction, conjugated to 'now'."""
    if pending is None:
        return pose, anchor
    fut, trigger_pose = pending
    if not fut.done():
        return pose, anchor
    state.in_progress = False
    delta = fut.result()
    if delta is None:
        return pose, anchor
    stats.refinements += 1
    corr = trigger_pose.compose(delta).compose(trigger_pose.inverse())
    new_pose = corr.compose(pose, timestamp=pose.timestamp)
    new_anchor = corr.compose(anchor, timestamp=anchor.timestamp)
    return new_pose, new_anchor


def _maybe_submit(state, pose, params, pool, pending):
    if pending is not None and not pending[0].done():
        return pending
    if state.distance_since_last < state.trigger_distance:
        return None
    if len(state.pending_scans) < 2:
        return None
    # snapshot: the worker owns a private state, the live one resets now
    snapshot = RefineState(trigger_distance=state.trigger_distance,
                           pending_scans=list(state.pending_scans),
                           distance_since_last=state.distance_since_last)
    newest = state.pending_scans[-1]
    state.pending_scans = [(newest[0], Pose.identity(newest[1].timestamp))]
    state.distance_since_last = 0.0
    state.in_progress = True
    fut = pool.submit(maybe_refine, snapshot, pose, params)
    return (fut, pose)


def bench(cfg: PipelineConfig, threads_list):
    """Time generate+integrate per frame at each worker count; asserts the
    produced volumes are identical across counts."""
    cfg.validate()
    _, _, _, _, tsdf_p = _params_from_config(cfg)
    frames = list_frames(cfg.dataset_dir)
    rows = []
    if not frames:
        return rows
    geom = tsdf.GridGeometry.centered(
        np.zeros(3), (cfg.map_size_x, cfg.map_size_y, cfg.map_size_z),
        cfg.tsdf_voxel_size, cfg.tsdf_tau, cfg.chunk_size)
    scans = [read_scan(p) for p in frames]
    reference = None
    base_avg = None
    for n in threads_list:
        volume = tsdf.TsdfVolume(geom, cfg.tsdf_weight_max)
        times = []
        for scan in scans:
            pose = Pose.identity(scan.timestamp)
            t0 = time.perf_counter()
            cand, _ = tsdf.generate_candidate(scan, pose, geom, tsdf_p, n)
            tsdf.integrate(volume, cand)
            times.append((time.perf_counter() - t0) * 1e3)
        if reference is None:
            reference = volume.cells
            base_avg = float(np.mean(times))
        elif not np.array_equal(volume.cells, reference):
            raise AssertionError(f"volume at {n} workers differs from baseline")
        avg = float(np.mean(times))
        rows.append({"threads": n, "min_ms": float(np.min(times)),
                     "max_ms": float(np.max(times)), "avg_ms": avg,
                     "speedup": base_avg / avg if avg > 0 else float("inf")})
    return rows


def bench_table(rows) -> str:
    lines = [f"{'threads':>7} {'min ms':>9} {'max ms':>9} {'avg ms':>9} "
             f"{'speedup':>8}"]
    for r in rows:
        lines.append(f"{r['threads']:>7} {r['min_ms']:9.2f} {r['max_ms']:9.2f} "
                     f"{r['avg_ms']:9.2f} {r['speedup']:8.2f}")
    return "\n".join(lines)

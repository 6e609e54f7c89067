"""Pipeline configuration: flat key=value text, unknown keys rejected."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from featsense.errors import ConfigError


@dataclass
class PipelineConfig:
    dataset_dir: str = ""
    out_trajectory: str = "trajectory.txt"
    out_map: str = "map.ftsd"
    workers: int = 1
    realtime_budget_ms: float = 0.0  # 0 = offline (synchronous refinement)
    debug_image_dir: str = ""

    # intensity image pipeline
    gaussian_sigma: float = 1.0
    gaussian_ksize: int = 5
    bilateral_sigma_space: float = 2.0
    bilateral_sigma_range: float = 0.1
    bilateral_ksize: int = 5
    sobel_threshold: float = 0.5

    # feature extraction
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

    # odometry
    opt_steps: int = 5
    corr_max_dist: float = 1.0
    eig_ratio: float = 3.0
    plane_max_point_dist: float = 0.2
    edge_half_len: float = 0.1
    huber_delta: float = 0.1
    weighting: str = "curvature"
    leaf_edge: float = 0.4
    leaf_surf: float = 0.8
    local_radius: float = 100.0

    # refinement
    refine_enabled: bool = True
    trigger_distance: float = 5.0
    refine_voxel_size: float = 0.5
    refine_knn: int = 10
    refine_scan_leaf: float = 0.3

    # tsdf backend
    tsdf_voxel_size: float = 0.064
    tsdf_tau: float = 0.6
    tsdf_weight_unit: int = 64
    tsdf_weight_max: int = 1024
    tsdf_behind_factor: float = 0.5
    chunk_size: int = 64
    map_size_x: float = 20.0
    map_size_y: float = 20.0
    map_size_z: float = 15.0

    # evaluation
    eval_max_dt: float = 0.02

    def validate(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.opt_steps < 1:
            raise ConfigError("opt_steps must be >= 1")
        for name in ("gaussian_ksize", "bilateral_ksize"):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ConfigError(f"{name} must be odd and >= 1")
        if self.tsdf_tau < 2 * self.tsdf_voxel_size:
            raise ConfigError("tsdf_tau must be at least two voxels")
        if not 0 < self.tsdf_weight_max <= 0xFFFF:
            raise ConfigError("tsdf_weight_max must fit in 16 bits")
        if self.weighting not in ("curvature", "uniform"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.trigger_distance <= 0:
            raise ConfigError("trigger_distance must be positive")
        return self


_FIELDS = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(key: str, raw: str):
    default = getattr(PipelineConfig(), key)
    raw = raw.strip().strip('"')
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_config(text: str) -> PipelineConfig:
    cfg = PipelineConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    return cfg.validate()


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(str(e)) from None
    return parse_config(text)

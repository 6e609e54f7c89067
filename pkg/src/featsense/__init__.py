"""Feature-based LiDAR odometry and TSDF mapping.

Pipeline stages: intensity-image edge extraction, LOAM-style curvature
features, scan-to-map Gauss-Newton registration, periodic voxelized-GICP
refinement, and concurrent TSDF fusion into a chunked, persistable local map.
"""

from featsense.scan_io import Pose, StructuredScan, Trajectory

__all__ = ["Pose", "StructuredScan", "Trajectory"]
__version__ = "0.1.0"

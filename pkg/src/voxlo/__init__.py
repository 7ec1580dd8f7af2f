"""voxlo: LiDAR odometry, metric-map pipelines, and global alignment."""

from voxlo.geometry import Pose3, Rot3, Tangent6, Twist

__all__ = ["Pose3", "Rot3", "Tangent6", "Twist"]

__version__ = "0.1.0"

"""Ground-constrained LiDAR odometry and pose-graph SLAM with a ray-cast simulator."""
from .errors import GcslamError
from .plane import PlaneCP, PlaneHF, transform_plane
from .se3 import Pose, PoseCovariance

__all__ = ["GcslamError", "PlaneCP", "PlaneHF", "Pose", "PoseCovariance", "transform_plane"]
__version__ = "0.1.0"

"""キーポイント位置合わせ用データモデル。"""

from .field import Grid, Volume, FeatureStack, PointCloud, coordinates
from .keypoint import Keypoint, LossWeights, LossReport, COVARIANCE_RIDGE
from .transform import AffineTransform, RigidTransform
from .metrics import MetricsRow, PairMetrics, METRICS_COLUMNS

__all__ = [
    "Grid",
    "Volume",
    "FeatureStack",
    "PointCloud",
    "coordinates",
    "Keypoint",
    "LossWeights",
    "LossReport",
    "COVARIANCE_RIDGE",
    "AffineTransform",
    "RigidTransform",
    "MetricsRow",
    "PairMetrics",
    "METRICS_COLUMNS",
]

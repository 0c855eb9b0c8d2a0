"""ファイル入出力モジュール。"""

from .volume_io import VolumeFormatError, load_volume, save_volume
from .transform_io import load_point_cloud, load_transform, save_point_cloud, save_transform
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .reports import (
    LossLog,
    read_loss_log,
    read_metrics_csv,
    write_gradcheck_csv,
    write_metrics_csv,
    write_metrics_json,
)

__all__ = [
    "VolumeFormatError",
    "load_volume",
    "save_volume",
    "load_point_cloud",
    "load_transform",
    "save_point_cloud",
    "save_transform",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "LossLog",
    "read_loss_log",
    "read_metrics_csv",
    "write_gradcheck_csv",
    "write_metrics_csv",
    "write_metrics_json",
]

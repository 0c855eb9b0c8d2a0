"""点群 CSV と変換 JSON の入出力。"""

from pathlib import Path
from typing import Optional, Union
import logging

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ..models.field import PointCloud
from ..models.transform import AffineTransform, RigidTransform
from .schemas import TransformFile

logger = logging.getLogger(__name__)

POINT_COLUMNS = ["k", "x", "y", "z"]


def save_point_cloud(cloud: PointCloud, path: Union[str, Path]) -> None:
    """点群を `k,x,y,z` 形式の CSV に保存する。"""
    frame = pd.DataFrame(cloud.points, columns=["x", "y", "z"])
    frame.insert(0, "k", np.arange(len(cloud)))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")


def load_point_cloud(path: Union[str, Path]) -> PointCloud:
    """CSV から点群を読み込む（k 列の順に並べる）。"""
    frame = pd.read_csv(path)
    missing = [c for c in POINT_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"Point cloud CSV {path} is missing columns: {missing}")
    frame = frame.sort_values("k")
    return PointCloud(frame[["x", "y", "z"]].to_numpy(dtype=np.float64))


def save_transform(
    t: Union[AffineTransform, RigidTransform],
    path: Union[str, Path],
    kind: Optional[str] = None
) -> None:
    """変換を `{"matrix": 4x4}` の JSON に保存する。"""
    if isinstance(t, RigidTransform):
        kind = kind or "rigid"
        t = t.to_affine()
    document = TransformFile(matrix=t.to_list(), kind=kind)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(document.model_dump_json(indent=2), encoding="utf-8")


def load_transform(path: Union[str, Path]) -> AffineTransform:
    """変換 JSON を読み込む。"""
    try:
        document = TransformFile.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ValueError(f"Invalid transform file {path}: {e}")
    return AffineTransform(np.asarray(document.matrix, dtype=np.float64))

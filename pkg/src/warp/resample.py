"""逆写像による三線形リサンプリング（固定グリッド上へのワープ）。"""

from typing import Union
import logging

import numpy as np

from ..align.transforms import SingularTransformError
from ..autodiff import DiffNode, as_node, ops
from ..models.field import Grid, Volume
from ..models.transform import MIN_ABS_DETERMINANT, AffineTransform, RigidTransform

logger = logging.getLogger(__name__)


def _check_invertible(matrix: np.ndarray) -> None:
    det = float(np.linalg.det(matrix[:3, :3]))
    if not np.isfinite(det) or abs(det) <= MIN_ABS_DETERMINANT:
        raise SingularTransformError(f"Cannot resample through a singular transform (det={det:.3e})")


def resample_node(moving: DiffNode, transform: DiffNode, grid: Grid) -> DiffNode:
    """moved(x) = moving(T⁻¹x) をグラフ上で計算する。

    Args:
        moving: (nx, ny, nz) の強度ノード
        transform: 移動側→固定側の 4x4 行列ノード
        grid: 出力（固定側）グリッド

    Returns:
        x 最速で線形化した (|Ω|,) のノード
    """
    moving, transform = as_node(moving), as_node(transform)
    _check_invertible(transform.value)
    sampling = ops.inv(transform)
    return ops.trilinear_sample(moving, sampling, grid.coordinates())


def resample(moving: Volume, t: Union[AffineTransform, RigidTransform]) -> Volume:
    """移動側ボリュームを変換 t で固定グリッドへワープする。

    グリッド外のサンプルは0として読む。

    Raises:
        SingularTransformError: t が特異な場合
    """
    if isinstance(t, RigidTransform):
        t = t.to_affine()
    flat = resample_node(moving.data, t.matrix, moving.grid).value
    return Volume.from_flat(moving.grid, flat)

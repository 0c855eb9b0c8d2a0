"""対応点群の閉形式フィッティング（剛体: Kabsch、アフィン: 擬似逆行列）。"""

from typing import Union
import logging

import numpy as np

from ..autodiff import DiffNode, constant, ops
from ..models.field import PointCloud
from ..models.transform import AffineTransform, RigidTransform

logger = logging.getLogger(__name__)

# 相互共分散の第2特異値 / 第1特異値の下限
DEFAULT_SINGULAR_RATIO = 1e-9
# 同次座標行列 M (4xK) の条件数の上限
DEFAULT_MAX_CONDITION = 1e8

PointsLike = Union[DiffNode, PointCloud, np.ndarray]


class DegenerateConfigurationError(Exception):
    """剛体フィットに対して点群が退化している（共線など）。"""
    pass


class CoplanarConfigurationError(Exception):
    """アフィンフィットに対して点群がランク不足（共面など）。"""

    def __init__(self, message: str, condition_number: float = float("inf")):
        super().__init__(message)
        self.condition_number = condition_number


def _as_points(points: PointsLike) -> DiffNode:
    if isinstance(points, DiffNode):
        return points
    if isinstance(points, PointCloud):
        return constant(points.points)
    return constant(np.asarray(points, dtype=np.float64))


def _check_pair(moving: DiffNode, fixed: DiffNode, minimum: int, kind: str) -> None:
    if moving.shape != fixed.shape or moving.value.ndim != 2 or moving.shape[1] != 3:
        raise ValueError(
            f"Point clouds must both be (K, 3): {moving.shape} vs {fixed.shape}"
        )
    if moving.shape[0] < minimum:
        error_cls = DegenerateConfigurationError if kind == "rigid" else CoplanarConfigurationError
        raise error_cls(f"{kind} fit needs at least {minimum} points, got {moving.shape[0]}")


def fit_rigid_node(
    moving: PointsLike,
    fixed: PointsLike,
    singular_ratio: float = DEFAULT_SINGULAR_RATIO
) -> DiffNode:
    """argmin_{R,t} Σ‖f_k − (R m_k + t)‖² を 4x4 行列ノードとして返す。

    Args:
        moving: 移動側の点群 (K, 3)
        fixed: 固定側の点群 (K, 3)
        singular_ratio: 退化判定の特異値比

    Returns:
        微分可能な 4x4 同次行列ノード

    Raises:
        DegenerateConfigurationError: 点数不足または共線
    """
    moving, fixed = _as_points(moving), _as_points(fixed)
    _check_pair(moving, fixed, 3, "rigid")

    moving_centroid = ops.reduce_mean(moving, axis=0, keepdims=True)
    fixed_centroid = ops.reduce_mean(fixed, axis=0, keepdims=True)
    centered_moving = ops.sub(moving, moving_centroid)
    centered_fixed = ops.sub(fixed, fixed_centroid)
    cross = ops.matmul(ops.transpose(centered_moving), centered_fixed)

    singular_values = np.linalg.svd(cross.value, compute_uv=False)
    if singular_values[0] <= 0.0 or singular_values[1] < singular_ratio * singular_values[0]:
        raise DegenerateConfigurationError(
            f"Degenerate point configuration (singular values {singular_values.tolist()})"
        )

    rotation = ops.kabsch_rotation(cross)
    rotated_centroid = ops.reshape(
        ops.matmul(rotation, ops.reshape(moving_centroid, (3, 1))), (3,)
    )
    translation = ops.sub(ops.reshape(fixed_centroid, (3,)), rotated_centroid)
    return ops.homogeneous(rotation, translation)


def fit_affine_node(
    moving: PointsLike,
    fixed: PointsLike,
    max_condition: float = DEFAULT_MAX_CONDITION
) -> DiffNode:
    """T = F Mᵀ (M Mᵀ)⁻¹ を 4x4 行列ノードとして返す（最終行は (0,0,0,1)）。

    Raises:
        CoplanarConfigurationError: ランク不足または条件数超過
    """
    moving, fixed = _as_points(moving), _as_points(fixed)
    _check_pair(moving, fixed, 4, "affine")

    k = moving.shape[0]
    moving_h = ops.concatenate([moving, np.ones((k, 1))], axis=1)
    condition = float(np.linalg.cond(moving_h.value.T))
    if not np.isfinite(condition) or condition >= max_condition:
        raise CoplanarConfigurationError(
            f"Coplanar or ill-conditioned point configuration "
            f"(condition number {condition:.3e})",
            condition_number=condition
        )

    gram = ops.matmul(ops.transpose(moving_h), moving_h)
    cross = ops.matmul(ops.transpose(fixed), moving_h)
    top = ops.matmul(cross, ops.inv(gram))
    return ops.homogeneous(
        ops.getitem(top, (slice(None), slice(0, 3))),
        ops.getitem(top, (slice(None), 3))
    )


def fit_rigid(
    moving: PointCloud,
    fixed: PointCloud,
    singular_ratio: float = DEFAULT_SINGULAR_RATIO
) -> RigidTransform:
    """閉形式の剛体フィット（行列式補正付き SVD）。"""
    matrix = fit_rigid_node(moving, fixed, singular_ratio).value
    return RigidTransform(rotation=matrix[:3, :3], translation=matrix[:3, 3])


def fit_affine(
    moving: PointCloud,
    fixed: PointCloud,
    max_condition: float = DEFAULT_MAX_CONDITION
) -> AffineTransform:
    """閉形式のアフィンフィット（正規方程式）。"""
    return AffineTransform(fit_affine_node(moving, fixed, max_condition).value)


def fit_residual(moving: PointCloud, fixed: PointCloud, transform: AffineTransform) -> float:
    """Σ‖μ^f − T μ^m‖²。"""
    mapped = moving.points @ transform.linear.T + transform.offset
    return float(np.sum((fixed.points - mapped) ** 2))

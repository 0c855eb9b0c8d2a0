"""変換の代数（合成・逆変換・点への適用）と誤差指標。"""

from typing import Union
import math

import numpy as np

from ..models.transform import AffineTransform, RigidTransform

TransformLike = Union[AffineTransform, RigidTransform]


class SingularTransformError(Exception):
    """逆変換できない変換。"""
    pass


def _as_affine(t: TransformLike) -> AffineTransform:
    return t.to_affine() if isinstance(t, RigidTransform) else t


def _as_rigid(t: TransformLike) -> RigidTransform:
    return t if isinstance(t, RigidTransform) else RigidTransform.from_affine(t)


def compose(a: TransformLike, b: TransformLike) -> AffineTransform:
    """a ∘ b（先に b を適用）。"""
    return AffineTransform(_as_affine(a).matrix @ _as_affine(b).matrix)


def invert(t: TransformLike) -> AffineTransform:
    """逆変換。

    Raises:
        SingularTransformError: 線形ブロックが特異な場合
    """
    t = _as_affine(t)
    if not t.is_invertible():
        raise SingularTransformError(
            f"Transform is singular (det={t.determinant():.3e})"
        )
    linear_inv = np.linalg.inv(t.linear)
    return AffineTransform.from_parts(linear_inv, -linear_inv @ t.offset)


def apply_point(t: TransformLike, p) -> np.ndarray:
    """点（または (n,3) の点群）を変換する。"""
    t = _as_affine(t)
    p = np.asarray(p, dtype=np.float64)
    return p @ t.linear.T + t.offset


def rotation_error(est: TransformLike, gt: TransformLike) -> float:
    """R_est R_gtᵀ の測地角（度）。

    cos θ = (trace − 1)/2 と sin θ = ‖axial(R_rel)‖ から atan2 で求める
    （arccos を [−1,1] にクランプした値と同じで、小角でも桁落ちしない）。
    """
    relative = _as_rigid(est).rotation @ _as_rigid(gt).rotation.T
    cos_theta = float(np.clip((np.trace(relative) - 1.0) / 2.0, -1.0, 1.0))
    axial = np.array([
        relative[2, 1] - relative[1, 2],
        relative[0, 2] - relative[2, 0],
        relative[1, 0] - relative[0, 1],
    ]) / 2.0
    sin_theta = float(min(np.linalg.norm(axial), 1.0))
    return math.degrees(math.atan2(sin_theta, cos_theta))


def translation_error(est: TransformLike, gt: TransformLike) -> float:
    """‖t_est − t_gt‖₂（ボクセル）。"""
    return float(np.linalg.norm(_as_affine(est).offset - _as_affine(gt).offset))


def matrix_error(est: TransformLike, gt: TransformLike) -> float:
    """‖T̂ − T_gt‖_max（アフィン課題の指標）。"""
    return float(np.max(np.abs(_as_affine(est).matrix - _as_affine(gt).matrix)))

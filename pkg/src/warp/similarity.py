"""固定ボリュームとワープ後ボリュームの類似度損失。"""

from enum import Enum
import logging

import numpy as np

from ..autodiff import DiffNode, as_node, constant, ops
from ..models.field import Volume

logger = logging.getLogger(__name__)

# NCC の分散ガード
NCC_EPSILON = 1e-8


class GridMismatchError(Exception):
    """グリッドの異なるボリューム同士の比較。"""
    pass


class SimilarityKind(Enum):
    """類似度損失の種類。"""
    MSE = "mse"
    NCC = "ncc"

    @classmethod
    def parse(cls, value) -> "SimilarityKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"Unknown similarity kind: {value} (expected 'mse' or 'ncc')")


def mse_node(fixed: DiffNode, moved: DiffNode) -> DiffNode:
    """(1/|Ω|) Σ (fixed − moved)²。"""
    return ops.reduce_mean(ops.square(ops.sub(fixed, moved)))


def _is_flat(values: np.ndarray) -> bool:
    return values.size == 0 or bool(np.all(values == values.flat[0]))


def ncc_node(fixed: DiffNode, moved: DiffNode, eps: float = NCC_EPSILON) -> DiffNode:
    """1 − 大域ピアソン相関。

    両方が一定値なら相関を1とみなして0を返す。片方だけ一定なら1になる。
    """
    fixed, moved = as_node(fixed), as_node(moved)
    if _is_flat(fixed.value) and _is_flat(moved.value):
        return constant(0.0)
    a = ops.sub(fixed, ops.reduce_mean(fixed))
    b = ops.sub(moved, ops.reduce_mean(moved))
    cov = ops.reduce_mean(ops.mul(a, b))
    var_a = ops.add(ops.reduce_mean(ops.square(a)), eps)
    var_b = ops.add(ops.reduce_mean(ops.square(b)), eps)
    correlation = ops.div(cov, ops.sqrt(ops.mul(var_a, var_b)))
    return ops.sub(1.0, correlation)


def similarity_node(fixed, moved, kind=SimilarityKind.MSE) -> DiffNode:
    """線形化済みの2つの強度配列から L_sim ノードを作る。"""
    fixed, moved = as_node(fixed), as_node(moved)
    if fixed.shape != moved.shape:
        raise GridMismatchError(f"Similarity on mismatched shapes: {fixed.shape} vs {moved.shape}")
    kind = SimilarityKind.parse(kind)
    if kind is SimilarityKind.MSE:
        return mse_node(fixed, moved)
    return ncc_node(fixed, moved)


def similarity(fixed: Volume, moved: Volume, kind=SimilarityKind.MSE) -> float:
    """同一グリッド上の2ボリュームの類似度損失。

    Raises:
        GridMismatchError: グリッドが異なる場合
    """
    if fixed.grid != moved.grid:
        raise GridMismatchError(f"Grid mismatch: {fixed.grid} vs {moved.grid}")
    return float(similarity_node(fixed.flat(), moved.flat(), kind).value)


def interior_mask(volume: Volume, margin: int) -> np.ndarray:
    """境界から margin ボクセル以上内側のボクセルを True とするマスク（x 最速）。"""
    coords = volume.grid.coordinates()
    hi = np.asarray(volume.grid.dims) - 1 - margin
    return np.all((coords >= margin) & (coords <= hi), axis=1)

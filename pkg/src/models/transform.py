"""同次座標のアフィン変換と剛体変換のデータモデル。"""

from dataclasses import dataclass

import numpy as np

# 体積に適用する変換の線形ブロックの最小 |det|
MIN_ABS_DETERMINANT = 1e-12


@dataclass
class AffineTransform:
    """移動側座標を固定側座標へ写す 4x4 同次行列 T̂。"""
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise ValueError(f"AffineTransform needs a 4x4 matrix, got {matrix.shape}")
        # 最終行は常に厳密に (0,0,0,1)
        matrix[3] = (0.0, 0.0, 0.0, 1.0)
        self.matrix = matrix

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def from_parts(cls, linear: np.ndarray, translation: np.ndarray) -> "AffineTransform":
        """3x3 線形ブロックと並進から作成する。"""
        matrix = np.eye(4)
        matrix[:3, :3] = linear
        matrix[:3, 3] = translation
        return cls(matrix)

    @classmethod
    def translation(cls, offset) -> "AffineTransform":
        return cls.from_parts(np.eye(3), np.asarray(offset, dtype=np.float64))

    @classmethod
    def from_rigid(cls, transform: "RigidTransform") -> "AffineTransform":
        return cls.from_parts(transform.rotation, transform.translation)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def determinant(self) -> float:
        """線形ブロックの行列式。"""
        return float(np.linalg.det(self.linear))

    def is_invertible(self) -> bool:
        return abs(self.determinant()) > MIN_ABS_DETERMINANT

    def to_list(self) -> list:
        """行優先の 4x4 リスト。"""
        return self.matrix.tolist()


@dataclass
class RigidTransform:
    """回転 R（直交、det +1）と並進 t（ボクセル）。"""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_affine(cls, transform: AffineTransform) -> "RigidTransform":
        """アフィン行列の線形ブロックを回転として読み出す。"""
        return cls(transform.linear.copy(), transform.offset.copy())

    def to_affine(self) -> AffineTransform:
        return AffineTransform.from_rigid(self)

    def orthogonality_error(self) -> float:
        """‖RᵀR − I‖_max。"""
        return float(np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))))

    def is_valid(self, tol: float = 1e-9) -> bool:
        return self.orthogonality_error() < tol and np.linalg.det(self.rotation) > 0.0

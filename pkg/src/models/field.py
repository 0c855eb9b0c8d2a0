"""3次元スカラー場・座標グリッド・特徴マップのデータモデル。"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class Grid:
    """ボクセル単位の離散グリッド Ω。

    座標はボクセルインデックスそのもの（間隔1、原点は角）。
    線形化順序は x が最速（Fortran順）。
    """
    dims: Tuple[int, int, int]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"Grid dims must be three positive integers: {self.dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def size(self) -> int:
        """ボクセル数 |Ω|。"""
        nx, ny, nz = self.dims
        return nx * ny * nz

    def coordinates(self) -> np.ndarray:
        """全ボクセルの座標を返す。

        Returns:
            (|Ω|, 3) 配列。i が最速で変化する順序
        """
        nx, ny, nz = self.dims
        i, j, k = np.meshgrid(
            np.arange(nx, dtype=np.float64),
            np.arange(ny, dtype=np.float64),
            np.arange(nz, dtype=np.float64),
            indexing="ij"
        )
        return np.stack(
            [i.ravel(order="F"), j.ravel(order="F"), k.ravel(order="F")],
            axis=1
        )

    def center(self) -> np.ndarray:
        """グリッド中心の座標。"""
        return (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        """座標の最小値と最大値。"""
        return np.zeros(3), np.asarray(self.dims, dtype=np.float64) - 1.0

    def contains(self, points: np.ndarray, margin: float = 0.0, tol: float = 1e-9) -> bool:
        """全ての点がマージン付きでグリッド内にあるかを確認する。"""
        lo, hi = self.bounding_box()
        points = np.atleast_2d(points)
        return bool(
            np.all(points >= lo + margin - tol) and np.all(points <= hi - margin + tol)
        )

    def __str__(self) -> str:
        return "x".join(str(d) for d in self.dims)


def coordinates(grid: Grid) -> np.ndarray:
    """グリッド座標の一覧（`Grid.coordinates` の関数形式）。"""
    return grid.coordinates()


@dataclass
class Volume:
    """グリッド上の有限なスカラー強度場。

    data は (nx, ny, nz) 形状で保持し、線形化時は x 最速順を用いる。
    """
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.size != self.grid.size:
            raise ValueError(
                f"Volume data has {data.size} values, grid {self.grid} needs {self.grid.size}"
            )
        data = data.reshape(self.grid.dims, order="F") if data.ndim != 3 else data
        if data.shape != self.grid.dims:
            raise ValueError(f"Volume shape {data.shape} does not match grid {self.grid}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Volume data contains non-finite values")
        self.data = data

    @classmethod
    def zeros(cls, grid: Grid) -> "Volume":
        """ゼロ場を作成する。"""
        return cls(grid=grid, data=np.zeros(grid.dims))

    @classmethod
    def from_flat(cls, grid: Grid, flat: np.ndarray) -> "Volume":
        """x 最速の1次元配列から作成する。"""
        return cls(grid=grid, data=np.asarray(flat, dtype=np.float64).reshape(grid.dims, order="F"))

    def flat(self) -> np.ndarray:
        """x 最速で線形化したデータ。"""
        return self.data.ravel(order="F")


@dataclass
class FeatureStack:
    """K チャネルの特徴マップ（ロジットまたは正規化済み）。

    data は (K, |Ω|) 形状、各行は x 最速で線形化したチャネル。
    """
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 4:
            data = data.reshape(data.shape[0], -1, order="F")
        if data.ndim != 2 or data.shape[1] != self.grid.size:
            raise ValueError(
                f"FeatureStack shape {data.shape} incompatible with grid {self.grid}"
            )
        self.data = data

    @property
    def channels(self) -> int:
        """チャネル数 K。"""
        return self.data.shape[0]

    def channel(self, k: int) -> np.ndarray:
        """k 番目のチャネル（線形化済み）。"""
        return self.data[k]

    def channel_sums(self) -> np.ndarray:
        """各チャネルの総和。"""
        return self.data.sum(axis=1)

    def is_normalized(self, tol: float = 1e-9) -> bool:
        """全チャネルが非負かつ総和1かを確認する。"""
        return bool(np.all(self.data >= 0.0) and np.allclose(self.channel_sums(), 1.0, atol=tol, rtol=0.0))


@dataclass
class PointCloud:
    """チャネル順に並んだ K 個の3次元点。

    固定側の k 番目と移動側の k 番目が対応する。
    """
    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"PointCloud must be (K, 3), got {points.shape}")
        self.points = points

    def __len__(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        """重心。"""
        return self.points.mean(axis=0)

    def pairwise_distances(self) -> np.ndarray:
        """k < k' の全ペア間距離（上三角順）。"""
        i, j = np.triu_indices(len(self), k=1)
        return np.linalg.norm(self.points[i] - self.points[j], axis=1)

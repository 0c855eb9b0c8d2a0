"""特徴マップから確率的キーポイント (μ_k, Σ_k) を求める。"""

from typing import List, Tuple
import logging

import numpy as np

from ..autodiff import DiffNode, constant, ops
from ..models.field import FeatureStack, Grid
from ..models.keypoint import COVARIANCE_RIDGE, Keypoint

logger = logging.getLogger(__name__)

# チャネル正規化の許容誤差
NORMALIZATION_TOLERANCE = 1e-6


class NormalizationError(Exception):
    """正規化されていないチャネルに対するモーメント計算。"""
    pass


def normalize_features(raw: FeatureStack) -> FeatureStack:
    """ロジットをチャネルごとの空間ソフトマックスで正規化する。

    Args:
        raw: ロジットの特徴スタック

    Returns:
        各チャネルが非負で総和1の FeatureStack
    """
    return FeatureStack(grid=raw.grid, data=ops.spatial_softmax(raw.data).value)


def _check_normalized(channel: np.ndarray) -> None:
    total = float(np.sum(channel))
    if np.any(channel < 0.0) or abs(total - 1.0) > NORMALIZATION_TOLERANCE:
        raise NormalizationError(
            f"Channel is not normalised (sum={total:.9g}, min={float(np.min(channel)):.3g})"
        )


def center_of_mass(channel: np.ndarray, grid: Grid) -> np.ndarray:
    """μ = Σ_X X F(X)。

    Args:
        channel: x 最速で線形化した正規化済みチャネル
        grid: グリッド

    Returns:
        3次元ベクトル（ボクセル）
    """
    channel = np.asarray(channel, dtype=np.float64).ravel(order="F")
    _check_normalized(channel)
    return ops.first_moment(channel[None, :], grid.coordinates()).value[0]


def covariance(channel: np.ndarray, grid: Grid, mu: np.ndarray) -> np.ndarray:
    """Σ = Σ_X F(X)(X−μ)(X−μ)ᵀ（対称化済み）。"""
    channel = np.asarray(channel, dtype=np.float64).ravel(order="F")
    _check_normalized(channel)
    mu = np.asarray(mu, dtype=np.float64).reshape(1, 3)
    return ops.second_moment(channel[None, :], mu, grid.coordinates()).value[0]


def feature_moments(features: DiffNode, coords: np.ndarray) -> Tuple[DiffNode, DiffNode]:
    """全チャネルの μ (K,3) と Σ (K,3,3) をグラフ上で計算する。"""
    mu = ops.first_moment(features, coords)
    sigma = ops.second_moment(features, mu, coords)
    return mu, sigma


def gaussian_log_density(
    mu: DiffNode,
    sigma: DiffNode,
    coords: np.ndarray,
    mode: str = "normalised",
    eps: float = COVARIANCE_RIDGE
) -> DiffNode:
    """ボクセル中心での log N(X | μ_k, Σ_k + εI)。

    Args:
        mu: (K, 3)
        sigma: (K, 3, 3)
        coords: (N, 3)
        mode: "density"（連続密度）または "normalised"（Ω上で総和1）
        eps: 共分散リッジ

    Returns:
        (K, N) のノード
    """
    if mode not in ("normalised", "density"):
        raise ValueError(f"Unknown Gaussian mode: {mode}")
    k = mu.shape[0]
    regularized = ops.add(sigma, eps * np.eye(3))
    precision = ops.inv(regularized)
    log_det = ops.reshape(ops.logdet(regularized), (k, 1))
    quad = ops.mahalanobis(precision, mu, coords)
    # −½(m + log|Σ|) − (3/2) log 2π
    log_n = ops.sub(
        ops.scale(ops.add(quad, log_det), -0.5),
        1.5 * np.log(2.0 * np.pi)
    )
    if mode == "normalised":
        log_n = ops.log_softmax(log_n)
    return log_n


def discretized_gaussian(
    mu: np.ndarray,
    sigma: np.ndarray,
    grid: Grid,
    mode: str = "normalised"
) -> np.ndarray:
    """グリッド上に離散化した Gaussian チャネルを返す（x 最速）。"""
    mu_node = constant(np.asarray(mu, dtype=np.float64).reshape(1, 3))
    sigma_node = constant(np.asarray(sigma, dtype=np.float64).reshape(1, 3, 3))
    log_n = gaussian_log_density(mu_node, sigma_node, grid.coordinates(), mode)
    return np.exp(log_n.value[0])


def extract_keypoints(features: FeatureStack) -> List[Keypoint]:
    """正規化済み特徴スタックから全チャネルのキーポイントを求める。"""
    if not features.is_normalized(tol=NORMALIZATION_TOLERANCE):
        raise NormalizationError("FeatureStack is not normalised")
    mu, sigma = feature_moments(constant(features.data), features.grid.coordinates())
    masses = features.channel_sums()
    return [
        Keypoint(mu=mu.value[k], sigma=sigma.value[k], mass=float(masses[k]))
        for k in range(features.channels)
    ]

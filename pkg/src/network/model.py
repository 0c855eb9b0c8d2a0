"""シャムネットワーク型の特徴抽出器 Φ_θ（ボリューム → K チャネルのロジット）。"""

from dataclasses import dataclass, asdict, field
from typing import Callable, List, Optional, Sequence, Tuple
import logging

import numpy as np

from ..autodiff import DiffNode, as_node, constant, leaf, ops
from ..keypoints import extract_keypoints, normalize_features
from ..models.field import FeatureStack, PointCloud, Volume
from ..models.keypoint import Keypoint
from ..warp.similarity import GridMismatchError

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    """特徴抽出器の構成。"""
    hidden_channels: int = 8
    depth: int = 2
    keypoints: int = 8
    kernel_size: int = 3
    leaky_alpha: float = 0.01
    seed: int = 0

    def validate(self) -> List[str]:
        """構成を検証する。

        Returns:
            検証エラーのリスト（有効な場合は空）
        """
        errors = []
        if self.keypoints < 2:
            errors.append(f"keypoints (K) must be >= 2: {self.keypoints}")
        if self.depth < 1:
            errors.append(f"depth must be >= 1: {self.depth}")
        if self.hidden_channels < 1:
            errors.append(f"hidden_channels must be >= 1: {self.hidden_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            errors.append(f"kernel_size must be a positive odd integer: {self.kernel_size}")
        if self.leaky_alpha < 0.0:
            errors.append(f"leaky_alpha must be non-negative: {self.leaky_alpha}")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        config = cls()
        for key, value in (data or {}).items():
            if hasattr(config, key):
                setattr(config, key, value)
        return config


@dataclass
class ConvLayer:
    """畳み込みカーネルバンク (c_out, c_in, k, k, k) とバイアス。"""
    weight: np.ndarray
    bias: np.ndarray

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight.shape[1:]))


@dataclass
class FeatureExtractor:
    """畳み込み層の列と 1x1x1 射影からなる特徴抽出器。

    パラメータの並びは conv0.weight, conv0.bias, ..., proj.weight, proj.bias。
    固定・移動の両ボリュームに同一のパラメータを適用する。
    """
    config: ModelConfig
    layers: List[ConvLayer]
    projection: ConvLayer
    grid_dims: Optional[Tuple[int, int, int]] = None

    @property
    def channels(self) -> int:
        """出力チャネル数 K。"""
        return self.projection.weight.shape[0]

    def parameter_names(self) -> List[str]:
        names = []
        for i in range(len(self.layers)):
            names.extend([f"conv{i}.weight", f"conv{i}.bias"])
        names.extend(["proj.weight", "proj.bias"])
        return names

    def parameters(self) -> List[np.ndarray]:
        """パラメータ配列を所定の順序で返す。"""
        arrays = []
        for layer in [*self.layers, self.projection]:
            arrays.extend([layer.weight, layer.bias])
        return arrays

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> None:
        """所定の順序の配列でパラメータを置き換える。"""
        current = self.parameters()
        if len(arrays) != len(current):
            raise ValueError(f"Expected {len(current)} parameter arrays, got {len(arrays)}")
        for name, old, new in zip(self.parameter_names(), current, arrays):
            if np.shape(new) != old.shape:
                raise ValueError(f"Parameter {name} has shape {np.shape(new)}, expected {old.shape}")
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        for i, layer in enumerate(self.layers):
            layer.weight, layer.bias = arrays[2 * i], arrays[2 * i + 1]
        self.projection.weight, self.projection.bias = arrays[-2], arrays[-1]

    def parameter_count(self) -> int:
        """スカラーパラメータの総数。"""
        return int(sum(a.size for a in self.parameters()))

    def parameter_nodes(self, make: Callable = leaf) -> List[DiffNode]:
        """パラメータをグラフノードとして返す（既定は勾配を追跡する葉）。"""
        return [make(a, name) for a, name in zip(self.parameters(), self.parameter_names())]

    def _check_dims(self, dims: Tuple[int, ...]) -> None:
        if len(dims) != 3:
            raise GridMismatchError(f"Expected a 3-D volume, got shape {dims}")
        if any(d < self.config.kernel_size for d in dims):
            raise GridMismatchError(
                f"Volume dims {dims} are smaller than the {self.config.kernel_size}^3 kernel"
            )
        if self.grid_dims is not None and tuple(dims) != tuple(self.grid_dims):
            raise GridMismatchError(
                f"Volume dims {tuple(dims)} do not match training dims {tuple(self.grid_dims)}"
            )

    def forward_node(self, volume, params: Optional[Sequence[DiffNode]] = None) -> DiffNode:
        """ロジットを (K, |Ω|)（x 最速）のノードとして計算する。

        Args:
            volume: (nx, ny, nz) の強度（配列またはノード）
            params: parameter_nodes() と同じ順序のノード（省略時は定数）

        Returns:
            ロジットノード
        """
        volume = as_node(volume)
        self._check_dims(volume.shape)
        if params is None:
            params = self.parameter_nodes(constant)
        x = ops.reshape(volume, (1,) + tuple(volume.shape))
        for i in range(len(self.layers)):
            x = ops.conv3d(x, params[2 * i], params[2 * i + 1])
            x = ops.leaky_relu(x, self.config.leaky_alpha)
        x = ops.conv3d(x, params[-2], params[-1])
        return ops.reshape(x, (self.channels, -1), order="F")

    def forward(self, volume: Volume) -> FeatureStack:
        """ボリュームから K チャネルのロジットを計算する。"""
        logits = self.forward_node(volume.data)
        return FeatureStack(grid=volume.grid, data=logits.value)


def init_parameters(cfg: ModelConfig, grid_dims: Optional[Tuple[int, int, int]] = None) -> FeatureExtractor:
    """シードから特徴抽出器を初期化する。

    重みは平均0・標準偏差 1/√fan_in の正規分布、バイアスは0。

    Args:
        cfg: 構成
        grid_dims: 学習時のグリッド寸法（指定時は forward で照合する）

    Returns:
        FeatureExtractor
    """
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))

    rng = np.random.default_rng(cfg.seed)
    k = cfg.kernel_size

    def make_layer(c_out: int, c_in: int, size: int) -> ConvLayer:
        shape = (c_out, c_in, size, size, size)
        fan_in = c_in * size ** 3
        return ConvLayer(
            weight=rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape),
            bias=np.zeros(c_out)
        )

    layers = []
    c_in = 1
    for _ in range(cfg.depth):
        layers.append(make_layer(cfg.hidden_channels, c_in, k))
        c_in = cfg.hidden_channels
    projection = make_layer(cfg.keypoints, c_in, 1)

    model = FeatureExtractor(
        config=cfg,
        layers=layers,
        projection=projection,
        grid_dims=tuple(grid_dims) if grid_dims is not None else None
    )
    logger.info(
        f"FeatureExtractor initialized: depth={cfg.depth}, hidden={cfg.hidden_channels}, "
        f"K={cfg.keypoints}, parameters={model.parameter_count()}"
    )
    return model


@dataclass
class SiameseKeypoints:
    """シャム推論の結果。"""
    fixed_cloud: PointCloud
    moving_cloud: PointCloud
    fixed_keypoints: List[Keypoint] = field(default_factory=list)
    moving_keypoints: List[Keypoint] = field(default_factory=list)
    fixed_features: Optional[FeatureStack] = None
    moving_features: Optional[FeatureStack] = None


def siamese_keypoints(model: FeatureExtractor, fixed: Volume, moving: Volume) -> SiameseKeypoints:
    """同一パラメータで両ボリュームのキーポイントを求める。"""
    fixed_features = normalize_features(model.forward(fixed))
    moving_features = normalize_features(model.forward(moving))
    fixed_kps = extract_keypoints(fixed_features)
    moving_kps = extract_keypoints(moving_features)
    return SiameseKeypoints(
        fixed_cloud=PointCloud(np.stack([kp.mu for kp in fixed_kps])),
        moving_cloud=PointCloud(np.stack([kp.mu for kp in moving_kps])),
        fixed_keypoints=fixed_kps,
        moving_keypoints=moving_kps,
        fixed_features=fixed_features,
        moving_features=moving_features
    )

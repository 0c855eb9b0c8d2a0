"""設定管理モジュール。"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional
from pathlib import Path
import json
import logging

import yaml

from .align.fitting import DEFAULT_MAX_CONDITION, DEFAULT_SINGULAR_RATIO
from .harness.optimizer import AdamConfig
from .keypoints.losses import KL_MODES, VAR_NORMS
from .models.keypoint import LossWeights
from .network.model import ModelConfig
from .synth.scene import SceneSpec, TransformSpec
from .warp.similarity import SimilarityKind

logger = logging.getLogger(__name__)

TASKS = ("rigid", "affine")

# 入れ子セクションと対応するデータクラス
SECTIONS = {
    "model": ModelConfig,
    "weights": LossWeights,
    "optimizer": AdamConfig,
    "scene": SceneSpec,
    "transform": TransformSpec,
}


def _section_from_dict(cls, data: Optional[dict]):
    if hasattr(cls, "from_dict"):
        return cls.from_dict(data)
    instance = cls()
    for key, value in (data or {}).items():
        if hasattr(instance, key):
            setattr(instance, key, value)
        else:
            logger.warning(f"Unknown {cls.__name__} key ignored: {key}")
    return instance


def _section_to_dict(section) -> dict:
    if hasattr(section, "to_dict"):
        return section.to_dict()
    return dict(vars(section))


@dataclass
class Config:
    """学習・評価・アブレーションの設定。"""

    # 課題（rigid: Kabsch、affine: 正規方程式）
    task: str = "rigid"

    # 損失
    weights: LossWeights = field(default_factory=LossWeights)
    kl_mode: str = "normalised"
    var_norm: str = "rms"
    similarity: str = "mse"
    detach_gaussian_params: bool = False

    # モデルと最適化
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    steps: int = 2000
    batch_size: int = 2
    max_skip_fraction: float = 0.01

    # データ
    scene: SceneSpec = field(default_factory=SceneSpec)
    transform: TransformSpec = field(default_factory=TransformSpec)
    train_pairs: int = 32
    eval_pairs: int = 16
    train_seed: int = 1
    eval_seed: int = 2

    # 閉形式フィットの退化判定
    rigid_singular_ratio: float = DEFAULT_SINGULAR_RATIO
    affine_max_condition: float = DEFAULT_MAX_CONDITION

    # 評価と出力
    eval_every: int = 0
    log_interval: int = 50
    output_dir: str = "runs/default"

    # ロギング設定
    log_level: str = "INFO"
    log_file: Optional[str] = None

    @classmethod
    def from_yaml(cls, file_path: str) -> "Config":
        """YAML（または JSON）ファイルから設定を読み込む。

        Args:
            file_path: 設定ファイルのパス

        Returns:
            Configインスタンス
        """
        with open(file_path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}

        config = cls.from_dict(data)
        logger.info(f"Configuration loaded from {file_path}")
        return config

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        """辞書から設定を作成する（未知のキーは警告して無視）。

        Args:
            data: 設定辞書

        Returns:
            Configインスタンス
        """
        config = cls()

        for key, value in data.items():
            if key in SECTIONS:
                setattr(config, key, _section_from_dict(SECTIONS[key], value))
            elif hasattr(config, key):
                setattr(config, key, value)
            else:
                logger.warning(f"Unknown configuration key ignored: {key}")

        # 課題とアフィン変換の種類を揃える
        if "transform" not in data or "kind" not in (data.get("transform") or {}):
            config.transform.kind = config.task
        return config

    def validate(self) -> List[str]:
        """設定を検証する。

        Returns:
            検証エラーのリスト（有効な場合は空）
        """
        errors = []

        if self.task not in TASKS:
            errors.append(f"task must be one of {TASKS}: {self.task}")
        if self.transform.kind != self.task:
            errors.append(
                f"transform.kind ({self.transform.kind}) does not match task ({self.task})"
            )
        if self.kl_mode not in KL_MODES:
            errors.append(f"kl_mode must be one of {KL_MODES}: {self.kl_mode}")
        if self.var_norm not in VAR_NORMS:
            errors.append(f"var_norm must be one of {VAR_NORMS}: {self.var_norm}")
        try:
            SimilarityKind.parse(self.similarity)
        except ValueError as e:
            errors.append(str(e))

        if self.steps < 0:
            errors.append(f"steps must be non-negative: {self.steps}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1: {self.batch_size}")
        if self.train_pairs < 1 or self.eval_pairs < 1:
            errors.append("train_pairs and eval_pairs must be >= 1")
        if self.train_seed == self.eval_seed:
            errors.append("train_seed and eval_seed must differ so the splits are disjoint")
        if not 0.0 <= self.max_skip_fraction < 1.0:
            errors.append(f"max_skip_fraction must be in [0, 1): {self.max_skip_fraction}")
        if self.rigid_singular_ratio <= 0.0 or self.affine_max_condition <= 1.0:
            errors.append("degeneracy thresholds must be positive (condition limit > 1)")
        if self.log_interval < 1:
            errors.append(f"log_interval must be >= 1: {self.log_interval}")

        errors.extend(self.weights.validate())
        errors.extend(self.model.validate())
        errors.extend(self.optimizer.validate())
        errors.extend(self.scene.validate())
        errors.extend(self.transform.validate())
        return errors

    def to_dict(self) -> dict:
        """設定を辞書に変換する。

        Returns:
            辞書形式の設定
        """
        data: Dict[str, Any] = {}
        for key in self.__dataclass_fields__:
            value = getattr(self, key)
            data[key] = _section_to_dict(value) if key in SECTIONS else value
        return data

    def save_yaml(self, file_path: str) -> None:
        """設定をYAMLファイルに保存。

        Args:
            file_path: 保存先パス
        """
        output_path = Path(file_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)

        with open(output_path, "w", encoding="utf-8") as f:
            yaml.dump(
                self.to_dict(),
                f,
                default_flow_style=False,
                allow_unicode=True,
                sort_keys=False
            )

        logger.info(f"Configuration saved to {file_path}")

    def save_json(self, file_path: str) -> None:
        """実行ごとの config.json を保存。"""
        output_path = Path(file_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        output_path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

"""モデルパラメータのチェックポイント（float64 LE 本体 + JSON manifest）。"""

from pathlib import Path
from typing import Tuple, Union
import logging

import numpy as np
from pydantic import ValidationError

from ..network.model import FeatureExtractor, ModelConfig, init_parameters
from .schemas import CheckpointManifest, ParameterEntry

logger = logging.getLogger(__name__)

CHECKPOINT_BIN = "checkpoint.bin"
CHECKPOINT_JSON = "checkpoint.json"


class CheckpointError(Exception):
    """チェックポイントの読み込みエラー。"""
    pass


def save_checkpoint(model: FeatureExtractor, directory: Union[str, Path], step: int = 0) -> Path:
    """パラメータを所定の層順で連結して保存する。

    Args:
        model: 保存するモデル
        directory: 出力ディレクトリ
        step: 学習ステップ

    Returns:
        本体ファイルのパス
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    arrays = model.parameters()
    blob = np.concatenate([a.ravel(order="C") for a in arrays]).astype("<f8")
    manifest = CheckpointManifest(
        parameters=[
            ParameterEntry(name=name, shape=list(a.shape))
            for name, a in zip(model.parameter_names(), arrays)
        ],
        parameter_count=model.parameter_count(),
        model=model.config.to_dict(),
        grid_dims=model.grid_dims,
        step=step
    )

    bin_path = directory / CHECKPOINT_BIN
    bin_path.write_bytes(blob.tobytes())
    (directory / CHECKPOINT_JSON).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.debug(f"Checkpoint saved: {bin_path} (step {step})")
    return bin_path


def load_checkpoint(directory: Union[str, Path]) -> Tuple[FeatureExtractor, int]:
    """チェックポイントからモデルを復元する。

    Returns:
        (モデル, 保存時のステップ)

    Raises:
        CheckpointError: ファイル欠落、manifest 不正、サイズ不一致
    """
    directory = Path(directory)
    bin_path, json_path = directory / CHECKPOINT_BIN, directory / CHECKPOINT_JSON
    if not bin_path.exists() or not json_path.exists():
        raise CheckpointError(f"Checkpoint not found in {directory}")

    try:
        manifest = CheckpointManifest.model_validate_json(json_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CheckpointError(f"Invalid checkpoint manifest {json_path}: {e}")

    blob = np.frombuffer(bin_path.read_bytes(), dtype="<f8").astype(np.float64)
    if blob.size != manifest.parameter_count:
        raise CheckpointError(
            f"Checkpoint payload has {blob.size} values, manifest says {manifest.parameter_count}"
        )

    model = init_parameters(ModelConfig.from_dict(manifest.model), grid_dims=manifest.grid_dims)
    arrays, offset = [], 0
    for entry in manifest.parameters:
        size = int(np.prod(entry.shape))
        arrays.append(blob[offset:offset + size].reshape(entry.shape))
        offset += size
    model.set_parameters(arrays)
    return model, manifest.step

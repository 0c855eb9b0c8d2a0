"""ボリュームの入出力（JSON ヘッダー + リトルエンディアン float32 本体）。"""

from pathlib import Path
from typing import Union
import logging

import numpy as np
from pydantic import ValidationError

from ..models.field import Grid, Volume
from .schemas import VolumeHeader

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class VolumeFormatError(Exception):
    """ボリュームファイルの形式エラー。"""
    pass


def _paths(path: PathLike):
    stem = Path(path)
    if stem.suffix in (".json", ".raw"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".raw")


def save_volume(volume: Volume, path: PathLike) -> Path:
    """`<name>.json` と `<name>.raw` を書き出す。

    Args:
        volume: 保存するボリューム
        path: 拡張子なし（または .json/.raw）のパス

    Returns:
        ヘッダーファイルのパス
    """
    header_path, raw_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)

    header = VolumeHeader(dims=volume.grid.dims)
    header_path.write_text(header.model_dump_json(), encoding="utf-8")
    raw_path.write_bytes(volume.flat().astype("<f4").tobytes())

    logger.debug(f"Volume saved: {header_path} ({volume.grid})")
    return header_path


def load_volume(path: PathLike) -> Volume:
    """ヘッダーと本体からボリュームを読み込む。

    Raises:
        VolumeFormatError: ファイル欠落、ヘッダー不正、サイズ不一致、非有限値
    """
    header_path, raw_path = _paths(path)
    if not header_path.exists() or not raw_path.exists():
        raise VolumeFormatError(f"Volume files not found: {header_path} / {raw_path}")

    try:
        header = VolumeHeader.model_validate_json(header_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise VolumeFormatError(f"Invalid volume header {header_path}: {e}")

    grid = Grid(header.dims)
    payload = raw_path.read_bytes()
    expected = grid.size * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"Volume payload {raw_path} has {len(payload)} bytes, expected {expected}"
        )

    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"Volume {raw_path} contains non-finite values")
    return Volume.from_flat(grid, data)

"""合成データセットのディスク入出力（ボリューム・真値変換・manifest.json）。"""

from pathlib import Path
from typing import List, Union
import hashlib
import logging

import numpy as np

from ..align.transforms import compose, invert
from ..io.schemas import DatasetManifest, PairEntry, SeriesFrameEntry
from ..io.transform_io import load_point_cloud, load_transform, save_point_cloud, save_transform
from ..io.volume_io import load_volume, save_volume
from ..models.field import Volume
from ..models.transform import AffineTransform
from .generator import SeriesFrame, SyntheticPair
from .scene import SceneSpec, TransformSpec

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def content_hash(volumes: List[Volume]) -> str:
    """保存形式（float32 LE）の本体を順に連結した SHA-256。"""
    digest = hashlib.sha256()
    for volume in volumes:
        digest.update(volume.flat().astype("<f4").tobytes())
    return digest.hexdigest()


def write_dataset(
    pairs: List[SyntheticPair],
    out_dir: Union[str, Path],
    scene: SceneSpec,
    tspec: TransformSpec
) -> DatasetManifest:
    """ペア群を書き出し manifest.json を作成する。

    Args:
        pairs: 生成済みペア
        out_dir: 出力ディレクトリ
        scene: シーン仕様（manifest に記録）
        tspec: 変換仕様（manifest に記録）

    Returns:
        書き出した manifest
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for index, pair in enumerate(pairs):
        stem = f"pair_{index:03d}"
        save_volume(pair.fixed, out_dir / f"{stem}_fixed")
        save_volume(pair.moving, out_dir / f"{stem}_moving")
        save_transform(pair.gt, out_dir / f"{stem}_gt.json", kind=tspec.kind)
        if pair.fixed_centres is not None and pair.moving_centres is not None:
            save_point_cloud(pair.fixed_centres, out_dir / f"{stem}_fixed_centres.csv")
            save_point_cloud(pair.moving_centres, out_dir / f"{stem}_moving_centres.csv")
        entries.append(PairEntry(
            index=index,
            fixed=f"{stem}_fixed.json",
            moving=f"{stem}_moving.json",
            transform=f"{stem}_gt.json",
            scene_seed=pair.scene_seed,
            transform_seed=pair.transform_seed,
            gt=pair.gt.to_list()
        ))

    volumes = [v for pair in pairs for v in (pair.fixed, pair.moving)]
    manifest = DatasetManifest(
        kind="pairs",
        scene=scene.to_dict(),
        transform=tspec.to_dict(),
        pairs=entries,
        content_hash=content_hash(volumes)
    )
    (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Dataset written: {out_dir} ({len(pairs)} pairs, hash {manifest.content_hash[:12]})")
    return manifest


def write_series(
    frames: List[SeriesFrame],
    out_dir: Union[str, Path],
    scene: SceneSpec,
    tspec: TransformSpec
) -> DatasetManifest:
    """時系列を書き出し manifest.json を作成する。"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for index, frame in enumerate(frames):
        stem = f"frame_{index:03d}"
        save_volume(frame.volume, out_dir / stem)
        entries.append(SeriesFrameEntry(
            index=index,
            volume=f"{stem}.json",
            to_first=frame.to_first.to_list()
        ))

    manifest = DatasetManifest(
        kind="series",
        scene=scene.to_dict(),
        transform=tspec.to_dict(),
        frames=entries,
        content_hash=content_hash([f.volume for f in frames])
    )
    (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Series written: {out_dir} ({len(frames)} frames)")
    return manifest


def read_manifest(directory: Union[str, Path]) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"Dataset manifest not found: {path}")
    return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))


def load_dataset(directory: Union[str, Path]) -> List[SyntheticPair]:
    """write_dataset で書き出したペア群を読み込む。"""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.kind != "pairs":
        raise ValueError(f"{directory} holds a '{manifest.kind}' dataset, expected pairs")

    pairs = []
    for entry in manifest.pairs:
        stem = f"pair_{entry.index:03d}"
        fixed_centres = directory / f"{stem}_fixed_centres.csv"
        moving_centres = directory / f"{stem}_moving_centres.csv"
        pairs.append(SyntheticPair(
            fixed=load_volume(directory / entry.fixed),
            moving=load_volume(directory / entry.moving),
            gt=load_transform(directory / entry.transform),
            fixed_centres=load_point_cloud(fixed_centres) if fixed_centres.exists() else None,
            moving_centres=load_point_cloud(moving_centres) if moving_centres.exists() else None,
            scene_seed=entry.scene_seed,
            transform_seed=entry.transform_seed
        ))
    return pairs


def load_series(directory: Union[str, Path]) -> List[SeriesFrame]:
    """write_series で書き出した時系列を読み込む。"""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.kind != "series":
        raise ValueError(f"{directory} holds a '{manifest.kind}' dataset, expected series")
    frames = []
    previous = None
    for entry in manifest.frames:
        to_first = AffineTransform(np.asarray(entry.to_first, dtype=np.float64))
        to_previous = to_first if previous is None else compose(invert(previous), to_first)
        frames.append(SeriesFrame(volume=load_volume(directory / entry.volume),
                                  to_first=to_first, to_previous=to_previous))
        previous = to_first
    return frames


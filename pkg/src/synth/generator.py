"""シード付きの合成ペア・時系列・データセット生成。"""

from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Tuple
import logging

import numpy as np

from ..align.transforms import apply_point, compose, invert
from ..models.field import Grid, PointCloud, Volume
from ..models.transform import AffineTransform
from ..utils.retry import retry_until_valid
from .scene import (
    Blob,
    SceneSpec,
    TransformSpec,
    blob_centres,
    draw_blobs,
    moved_blob,
    render,
    sample_transform,
    support_inside,
)

logger = logging.getLogger(__name__)

MAX_REDRAWS = 100


class SynthesisError(Exception):
    """再抽選の上限に達した、または仕様が不正。"""
    pass


@dataclass
class SyntheticPair:
    """固定・移動ボリュームと真値変換（移動側→固定側）。

    (fixed, moving, gt) としてアンパックできる。
    """
    fixed: Volume
    moving: Volume
    gt: AffineTransform
    fixed_centres: Optional[PointCloud] = None
    moving_centres: Optional[PointCloud] = None
    scene_seed: int = 0
    transform_seed: int = 0
    attempts: int = 1

    def __iter__(self) -> Iterator:
        return iter((self.fixed, self.moving, self.gt))


@dataclass
class SeriesFrame:
    """時系列の1フレーム。to_first はフレーム座標 → フレーム0座標。"""
    volume: Volume
    to_first: AffineTransform
    to_previous: AffineTransform
    centres: Optional[PointCloud] = None


def _check_specs(scene: SceneSpec, tspec: TransformSpec) -> None:
    errors = scene.validate() + tspec.validate()
    if errors:
        raise SynthesisError("; ".join(errors))


class _Sampler:
    """シーン・変換・ノイズの3系統の乱数を保持する。"""

    def __init__(self, scene: SceneSpec, tspec: TransformSpec):
        _check_specs(scene, tspec)
        self.scene = scene
        self.tspec = tspec
        self.grid = Grid(scene.dims)
        self.center = self.grid.center()
        self.scene_rng = np.random.default_rng(scene.seed)
        self.transform_rng = np.random.default_rng(tspec.seed)
        self.noise_rng = np.random.default_rng([scene.seed, tspec.seed])

    def _check_supports(self, blobs: List[Blob], transform: AffineTransform, what: str) -> None:
        if not all(support_inside(moved_blob(b, transform), self.scene) for b in blobs):
            raise ValueError(f"{what} pushes a blob support out of the margin box")

    def draw_pair(self) -> Tuple[List[Blob], AffineTransform, int]:
        def draw(attempt: int):
            gt = sample_transform(self.tspec, self.transform_rng, self.center)
            blobs = draw_blobs(self.scene, self.scene_rng, (gt,), max_tries=MAX_REDRAWS)
            return blobs, gt

        (blobs, gt), attempts = self._retry(draw, "synthetic pair")
        return blobs, gt, attempts

    def draw_increment(self, blobs: List[Blob], to_first: AffineTransform) -> AffineTransform:
        def draw(attempt: int):
            step = sample_transform(self.tspec, self.transform_rng, self.center)
            self._check_supports(blobs, compose(to_first, step), "series frame")
            return step

        step, _ = self._retry(draw, "series frame")
        return step

    def _retry(self, draw, label: str):
        try:
            return retry_until_valid(draw, MAX_REDRAWS, (ValueError,), label=label)
        except RuntimeError as e:
            raise SynthesisError(str(e)) from e

    def noisy(self, volume: Volume) -> Volume:
        if self.scene.noise_sigma == 0.0:
            return volume
        noise = self.noise_rng.normal(0.0, self.scene.noise_sigma, size=volume.grid.dims)
        return Volume(grid=volume.grid, data=volume.data + noise)


def generate_pair(scene: SceneSpec, tspec: TransformSpec) -> SyntheticPair:
    """固定・移動ボリュームと真値変換を生成する。

    moving(x) = f(gt·x)（= resample(fixed, gt⁻¹) の厳密版）に独立なノイズを加える。

    Raises:
        SynthesisError: 100回の再抽選でマージン条件を満たせない場合
    """
    sampler = _Sampler(scene, tspec)
    blobs, gt, attempts = sampler.draw_pair()

    fixed = sampler.noisy(render(blobs, sampler.grid))
    moving = sampler.noisy(render(blobs, sampler.grid, gt))
    centres = blob_centres(blobs)
    return SyntheticPair(
        fixed=fixed,
        moving=moving,
        gt=gt,
        fixed_centres=PointCloud(centres),
        moving_centres=PointCloud(apply_point(invert(gt), centres)),
        scene_seed=scene.seed,
        transform_seed=tspec.seed,
        attempts=attempts
    )


def generate_series(scene: SceneSpec, tspec: TransformSpec, length: int) -> List[SeriesFrame]:
    """フレーム0へ揃えるための時系列を生成する。

    フレーム i の to_first は to_first(i−1) ∘ to_previous(i)。n=2 は generate_pair と一致する。
    """
    if length < 2:
        raise SynthesisError(f"Series length must be >= 2: {length}")

    sampler = _Sampler(scene, tspec)
    blobs, first_step, _ = sampler.draw_pair()
    centres = blob_centres(blobs)
    identity = AffineTransform.identity()

    frames = [SeriesFrame(
        volume=sampler.noisy(render(blobs, sampler.grid)),
        to_first=identity,
        to_previous=identity,
        centres=PointCloud(centres)
    )]
    to_first, step = first_step, first_step
    for index in range(1, length):
        if index > 1:
            step = sampler.draw_increment(blobs, to_first)
            to_first = compose(to_first, step)
        frames.append(SeriesFrame(
            volume=sampler.noisy(render(blobs, sampler.grid, to_first)),
            to_first=to_first,
            to_previous=step,
            centres=PointCloud(apply_point(invert(to_first), centres))
        ))
    logger.info(f"Generated series of {length} frames on grid {sampler.grid}")
    return frames


def pair_seeds(seed: int, n_pairs: int) -> List[Tuple[int, int]]:
    """データセット用の (シーン, 変換) シード列。"""
    state = np.random.SeedSequence(seed).generate_state(2 * n_pairs)
    return [(int(state[2 * i]), int(state[2 * i + 1])) for i in range(n_pairs)]


def make_dataset(scene: SceneSpec, tspec: TransformSpec, n_pairs: int, seed: int) -> List[SyntheticPair]:
    """seed から導いたシードで n_pairs 組のペアを生成する。"""
    if n_pairs < 1:
        raise SynthesisError(f"n_pairs must be >= 1: {n_pairs}")
    pairs = [
        generate_pair(replace(scene, seed=s), replace(tspec, seed=t))
        for s, t in pair_seeds(seed, n_pairs)
    ]
    redraws = sum(p.attempts - 1 for p in pairs)
    logger.info(f"Generated {n_pairs} pairs (seed {seed}, {redraws} redraws)")
    return pairs

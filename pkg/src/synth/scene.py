"""合成シーン（異方性ガウスブロブの混合）と変換サンプリング。"""

from dataclasses import dataclass, asdict
from typing import List, Optional, Sequence, Tuple
import itertools
import logging
import math

import numpy as np
from scipy.spatial.transform import Rotation

from ..models.field import Grid, Volume
from ..models.transform import AffineTransform

logger = logging.getLogger(__name__)

TRANSFORM_KINDS = ("rigid", "affine")
SUPPORT_SIGMAS = 3.0


def _update_from_dict(instance, data: Optional[dict]):
    for key, value in (data or {}).items():
        if hasattr(instance, key):
            if key == "dims":
                value = tuple(int(v) for v in value)
            setattr(instance, key, value)
        else:
            logger.warning(f"Unknown {type(instance).__name__} key ignored: {key}")
    return instance


@dataclass
class SceneSpec:
    """合成ボリュームの構成。

    背景は0で、ブロブの 3σ 支持は変換の前後とも境界から margin ボクセル以上内側に置く。
    """
    dims: Tuple[int, int, int] = (24, 24, 24)
    n_blobs: int = 6
    intensity_min: float = 0.2
    intensity_max: float = 1.0
    margin: float = 4.0
    eigen_min: float = 1.0
    eigen_max: float = 6.0
    noise_sigma: float = 0.01
    seed: int = 0

    @property
    def grid(self) -> Grid:
        return Grid(self.dims)

    def validate(self) -> List[str]:
        errors = []
        if len(self.dims) != 3 or any(int(d) < 4 for d in self.dims):
            errors.append(f"scene.dims must be three integers >= 4: {self.dims}")
        if self.n_blobs < 1:
            errors.append(f"scene.n_blobs must be >= 1: {self.n_blobs}")
        if not 0.0 <= self.intensity_min <= self.intensity_max:
            errors.append(
                f"scene intensity range is invalid: [{self.intensity_min}, {self.intensity_max}]"
            )
        if not 0.0 < self.eigen_min <= self.eigen_max:
            errors.append(f"scene eigenvalue range is invalid: [{self.eigen_min}, {self.eigen_max}]")
        if self.margin < 0.0:
            errors.append(f"scene.margin must be non-negative: {self.margin}")
        if self.noise_sigma < 0.0:
            errors.append(f"scene.noise_sigma must be non-negative: {self.noise_sigma}")
        return errors

    def to_dict(self) -> dict:
        data = asdict(self)
        data["dims"] = list(self.dims)
        return data

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "SceneSpec":
        return _update_from_dict(cls(), data)


@dataclass
class TransformSpec:
    """真値変換のサンプリング範囲。

    回転は軸を球面上一様、角度を [0, max_rotation_deg] 一様に取る。
    アフィンでは対数スケールと上三角せん断を追加する。
    """
    kind: str = "rigid"
    max_rotation_deg: float = 30.0
    max_translation_vox: float = 4.0
    log_scale_range: float = 0.2
    shear_range: float = 0.1
    integer_translation: bool = False
    seed: int = 0

    def validate(self) -> List[str]:
        errors = []
        if self.kind not in TRANSFORM_KINDS:
            errors.append(f"transform.kind must be one of {TRANSFORM_KINDS}: {self.kind}")
        for name in ("max_rotation_deg", "max_translation_vox", "log_scale_range", "shear_range"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                errors.append(f"transform.{name} must be finite and non-negative: {value}")
        return errors

    def is_zero(self) -> bool:
        return (
            self.max_rotation_deg == 0.0 and self.max_translation_vox == 0.0
            and (self.kind == "rigid" or (self.log_scale_range == 0.0 and self.shear_range == 0.0))
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "TransformSpec":
        return _update_from_dict(cls(), data)


@dataclass
class Blob:
    """1つの異方性ガウスブロブ。"""
    center: np.ndarray
    covariance: np.ndarray
    amplitude: float

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.covariance)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    """一様ランダムな回転行列（正規分布の四元数を正規化）。"""
    q = rng.normal(size=4)
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


def support_radius(covariance: np.ndarray) -> float:
    """3σ 支持の半径（最大固有値の平方根の3倍）。"""
    return SUPPORT_SIGMAS * math.sqrt(max(float(np.linalg.eigvalsh(covariance)[-1]), 0.0))


def margin_box(scene: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """ブロブ支持が収まるべき箱 [margin, dims − 1 − margin]。"""
    lo = np.full(3, float(scene.margin))
    hi = np.asarray(scene.dims, dtype=np.float64) - 1.0 - scene.margin
    return lo, hi


def moved_blob(blob: Blob, transform: AffineTransform) -> Blob:
    """v(x) = f(T x) で描画したときのブロブ（中心 T⁻¹c、共分散 L⁻¹ C L⁻ᵀ）。"""
    inv_linear = np.linalg.inv(transform.linear)
    return Blob(
        center=inv_linear @ (blob.center - transform.offset),
        covariance=inv_linear @ blob.covariance @ inv_linear.T,
        amplitude=blob.amplitude
    )


def support_inside(blob: Blob, scene: SceneSpec, tol: float = 1e-9) -> bool:
    """ブロブの 3σ 支持の外接箱がマージン箱に収まるか。"""
    lo, hi = margin_box(scene)
    radius = support_radius(blob.covariance)
    return bool(np.all(blob.center - radius >= lo - tol) and np.all(blob.center + radius <= hi + tol))


def _mapped_bounds(lo: np.ndarray, hi: np.ndarray, transform: AffineTransform) -> Tuple[np.ndarray, np.ndarray]:
    corners = np.array(list(itertools.product(*zip(lo, hi))), dtype=np.float64)
    mapped = corners @ transform.linear.T + transform.offset
    return mapped.min(axis=0), mapped.max(axis=0)


def _centre_box(
    scene: SceneSpec, covariance: np.ndarray, transforms: Sequence[AffineTransform]
) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """固定側の箱と、各 T で移した移動側の箱の外接箱との共通部分。空なら None。"""
    lo, hi = margin_box(scene)
    radius = support_radius(covariance)
    box_lo, box_hi = lo + radius, hi - radius
    for transform in transforms:
        inv_linear = np.linalg.inv(transform.linear)
        moved_radius = support_radius(inv_linear @ covariance @ inv_linear.T)
        if np.any(hi - moved_radius < lo + moved_radius):
            return None
        mapped_lo, mapped_hi = _mapped_bounds(lo + moved_radius, hi - moved_radius, transform)
        box_lo, box_hi = np.maximum(box_lo, mapped_lo), np.minimum(box_hi, mapped_hi)
    if np.any(box_hi < box_lo):
        return None
    return box_lo, box_hi


def _draw_blob(
    scene: SceneSpec,
    rng: np.random.Generator,
    transforms: Sequence[AffineTransform],
    max_tries: int
) -> Blob:
    for _ in range(max_tries):
        q = _random_rotation(rng)
        eigenvalues = rng.uniform(scene.eigen_min, scene.eigen_max, size=3)
        amplitude = float(rng.uniform(scene.intensity_min, scene.intensity_max))
        covariance = q @ np.diag(eigenvalues) @ q.T

        box = _centre_box(scene, covariance, transforms)
        if box is None:
            continue
        blob = Blob(center=rng.uniform(*box), covariance=covariance, amplitude=amplitude)
        # 外接箱は近似なので厳密に判定する
        if support_inside(blob, scene) and all(
            support_inside(moved_blob(blob, t), scene) for t in transforms
        ):
            return blob
    raise ValueError(f"No blob placement keeps the 3σ support inside the margin box after {max_tries} tries")


def draw_blobs(
    scene: SceneSpec,
    rng: np.random.Generator,
    transforms: Sequence[AffineTransform] = (),
    max_tries: int = 100
) -> List[Blob]:
    """ブロブの中心・共分散・振幅を抽選する。

    各ブロブの 3σ 支持は固定側でも、transforms の各 T で描画した側でも
    マージン箱に収まる。1ブロブあたり max_tries 回まで引き直す。

    Raises:
        ValueError: グリッドにマージン箱が取れない、または配置が見つからない場合
    """
    lo, hi = margin_box(scene)
    if np.any(hi < lo):
        raise ValueError(f"Grid {scene.dims} leaves no room for blobs with margin {scene.margin}")
    return [_draw_blob(scene, rng, transforms, max_tries) for _ in range(scene.n_blobs)]


def blob_centres(blobs: List[Blob]) -> np.ndarray:
    return np.stack([b.center for b in blobs])


def evaluate_blobs(blobs: List[Blob], points: np.ndarray) -> np.ndarray:
    """連続場 f(p) = Σ_b a_b exp(−½ (p−c_b)ᵀ C_b⁻¹ (p−c_b)) を評価する。"""
    values = np.zeros(points.shape[0])
    for blob in blobs:
        diff = points - blob.center
        quad = np.einsum("ni,ij,nj->n", diff, blob.precision, diff)
        values += blob.amplitude * np.exp(-0.5 * quad)
    return values


def render(blobs: List[Blob], grid: Grid, transform: Optional[AffineTransform] = None) -> Volume:
    """ブロブ場をグリッド上に描画する。

    transform を与えた場合は v(x) = f(T x)、すなわち
    resample(f, T⁻¹) の補間なしの厳密版を返す。
    """
    points = grid.coordinates()
    if transform is not None:
        points = points @ transform.linear.T + transform.offset
    return Volume.from_flat(grid, evaluate_blobs(blobs, points))


def sample_transform(tspec: TransformSpec, rng: np.random.Generator, center: np.ndarray) -> AffineTransform:
    """グリッド中心まわりの真値変換を抽選する。

    gt = Trans(c + t) · L · Trans(−c)。L は回転（アフィンではスケールとせん断を右から掛ける）。
    """
    axis = rng.normal(size=3)
    norm = np.linalg.norm(axis)
    axis = axis / norm if norm > 0.0 else np.array([0.0, 0.0, 1.0])
    angle = rng.uniform(0.0, math.radians(tspec.max_rotation_deg))
    linear = Rotation.from_rotvec(axis * angle).as_matrix()

    if tspec.integer_translation:
        bound = int(math.floor(tspec.max_translation_vox))
        translation = rng.integers(-bound, bound + 1, size=3).astype(np.float64)
    else:
        translation = rng.uniform(-tspec.max_translation_vox, tspec.max_translation_vox, size=3)

    if tspec.kind == "affine":
        scales = np.exp(rng.uniform(-tspec.log_scale_range, tspec.log_scale_range, size=3))
        shear = np.eye(3)
        shear[np.triu_indices(3, k=1)] = rng.uniform(-tspec.shear_range, tspec.shear_range, size=3)
        linear = linear @ np.diag(scales) @ shear

    center = np.asarray(center, dtype=np.float64)
    return AffineTransform.from_parts(linear, center + translation - linear @ center)

"""登録済み演算と合成目的関数に対する勾配検証スイート。"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from tqdm import tqdm

from ..autodiff import DiffNode, GradCheckReport, constant, grad_check, ops
from ..io.reports import write_gradcheck_csv
from ..models.field import Grid, Volume
from ..models.keypoint import LossWeights
from .pipeline import ObjectiveSettings, objective_from_logits

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-4
OBJECTIVE_TOLERANCE = 1e-3
OBJECTIVE_NAME = "objective"

DiffFunction = Callable[[DiffNode], DiffNode]


@dataclass
class OpCheck:
    """1つの検証インスタンス（葉 → スカラーの関数と評価点）。"""
    name: str
    function: DiffFunction
    point: np.ndarray
    step: float = DEFAULT_STEP
    tol: Optional[float] = None


def _unpack(x: DiffNode, shapes: Sequence[Tuple[int, ...]]) -> List[DiffNode]:
    """1次元の葉を指定形状の部分ノードに分割する。"""
    parts, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        parts.append(ops.reshape(ops.getitem(x, slice(offset, offset + size)), shape))
        offset += size
    return parts


def _pack(*arrays: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0.0:
        q[:, 0] = -q[:, 0]
    return q


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.2, 1.0, size=shape)


def registered_checks(seed: int = 0) -> List[OpCheck]:
    """演算ごとの小さな検証インスタンスを作る。

    出力はランダム重みとの内積でスカラー化するので、ヤコビアン全体が検証される。
    """
    rng = np.random.default_rng(seed)
    checks: List[OpCheck] = []

    def register(name: str, point: np.ndarray, build: DiffFunction) -> None:
        point = np.asarray(point, dtype=np.float64)
        weights = rng.normal(size=build(constant(point)).shape)
        checks.append(OpCheck(name, lambda x: ops.reduce_sum(ops.mul(build(x), weights)), point))

    a = rng.normal(size=(3, 4))
    positive = rng.uniform(0.5, 1.5, size=(3, 4))

    register("add", rng.normal(size=(1, 4)), lambda x: ops.add(x, a))
    register("sub", rng.normal(size=(3, 4)), lambda x: ops.sub(a, x))
    register("mul", rng.normal(size=(3, 4)), lambda x: ops.mul(x, ops.add(x, a)))
    register("div", rng.uniform(0.5, 1.5, size=(3, 4)),
             lambda x: ops.add(ops.div(x, positive), ops.div(a, x)))
    register("neg", rng.normal(size=(3, 4)), ops.neg)
    register("scale", rng.normal(size=(3, 4)), lambda x: ops.scale(x, -2.5))
    register("linear_combination", rng.normal(size=(3, 4)),
             lambda x: ops.linear_combination([x, ops.square(x)], [0.3, -1.2]))
    register("square", rng.normal(size=(3, 4)), ops.square)
    register("exp", rng.normal(size=(3, 4)), ops.exp)
    register("log", rng.uniform(0.5, 1.5, size=(3, 4)), ops.log)
    register("sqrt", rng.uniform(0.5, 1.5, size=(3, 4)), ops.sqrt)
    register("sigmoid", 2.0 * rng.normal(size=(3, 4)), ops.sigmoid)
    register("log_sigmoid", 2.0 * rng.normal(size=(3, 4)), ops.log_sigmoid)
    register("leaky_relu", _away_from_zero(rng, (3, 4)), lambda x: ops.leaky_relu(x, 0.01))
    register("reduce_sum", rng.normal(size=(3, 4)), lambda x: ops.reduce_sum(x, axis=1))
    register("reduce_mean", rng.normal(size=(3, 4)), lambda x: ops.reduce_mean(x, axis=0, keepdims=True))
    register("reshape", rng.normal(size=(2, 6)), lambda x: ops.reshape(x, (3, 4), order="F"))
    register("transpose", rng.normal(size=(2, 3, 4)), lambda x: ops.transpose(x, (1, 0, 2)))
    register("getitem", rng.normal(size=(4, 3)), lambda x: ops.getitem(x, [0, 2, 0]))
    register("stack", rng.normal(size=(3, 4)), lambda x: ops.stack([x, ops.square(x)], axis=1))
    register("concatenate", rng.normal(size=(3, 4)),
             lambda x: ops.concatenate([x, ops.exp(x)], axis=0))
    register("matmul", rng.normal(size=(2, 3, 4)),
             lambda x: ops.matmul(x, ops.transpose(x, (0, 2, 1))))
    register("spatial_softmax", rng.normal(size=(3, 10)), ops.spatial_softmax)
    register("log_softmax", rng.normal(size=(3, 10)), ops.log_softmax)

    conv_shapes = [(2, 4, 4, 4), (3, 2, 3, 3, 3), (3,)]
    register(
        "conv3d",
        _pack(rng.normal(size=conv_shapes[0]), 0.3 * rng.normal(size=conv_shapes[1]), rng.normal(size=3)),
        lambda x: ops.conv3d(*_unpack(x, conv_shapes))
    )

    coords = Grid((3, 3, 3)).coordinates()
    features = rng.uniform(0.1, 1.0, size=(2, 27))
    features = features / features.sum(axis=1, keepdims=True)
    mu = features @ coords
    register("first_moment", features, lambda x: ops.first_moment(x, coords))
    register(
        "second_moment",
        _pack(features, mu),
        lambda x: ops.second_moment(*_unpack(x, [(2, 27), (2, 3)]), coords)
    )
    spd = np.stack([2.0 * np.eye(3) + 0.3 * rng.normal(size=(3, 3)) for _ in range(2)])
    spd = 0.5 * (spd + np.swapaxes(spd, -1, -2))
    register(
        "mahalanobis",
        _pack(spd, mu),
        lambda x: ops.mahalanobis(*_unpack(x, [(2, 3, 3), (2, 3)]), coords)
    )
    register("inv", spd, ops.inv)
    register("logdet", spd, ops.logdet)
    register("pairwise_distances", 3.0 * rng.normal(size=(4, 3)), ops.pairwise_distances)

    cross = _random_rotation(rng) @ np.diag([5.0, 3.0, 1.0]) @ _random_rotation(rng).T
    register("rigid_fit", cross, ops.kabsch_rotation)
    register(
        "homogeneous",
        rng.normal(size=12),
        lambda x: ops.homogeneous(*_unpack(x, [(3, 3), (3,)]))
    )

    # サンプル点の小数部が [0.28, 0.46] 付近に収まるよう恒等変換の近くに置く
    sample_coords = Grid((4, 4, 4)).coordinates()
    linear = np.eye(3) + 0.002 * rng.normal(size=(3, 3))
    offset = np.array([0.37, 0.41, 0.33])
    register(
        "trilinear_sample",
        _pack(rng.uniform(0.0, 1.0, size=(4, 4, 4)), linear, offset),
        lambda x: _sample_packed(x, sample_coords)
    )
    return checks


def _sample_packed(x: DiffNode, coords: np.ndarray) -> DiffNode:
    volume, linear, offset = _unpack(x, [(4, 4, 4), (3, 3), (3,)])
    return ops.trilinear_sample(volume, ops.homogeneous(linear, offset), coords)


def objective_check(seed: int = 0, dims: Tuple[int, int, int] = (6, 6, 6), channels: int = 4) -> OpCheck:
    """6³ ペアでロジット → 目的関数全体（既定の重み）を検証するインスタンス。"""
    rng = np.random.default_rng(seed + 1)
    grid = Grid(dims)
    coords = grid.coordinates()
    center = grid.center()
    # 滑らかな強度（ガウス状の山）
    fixed = Volume.from_flat(grid, np.exp(-np.sum((coords - center) ** 2, axis=1) / 8.0))
    moving = Volume.from_flat(grid, np.exp(-np.sum((coords - center - 0.4) ** 2, axis=1) / 6.0))
    settings = ObjectiveSettings(weights=LossWeights())
    n = grid.size

    def function(x: DiffNode) -> DiffNode:
        logits_fixed, logits_moving = _unpack(x, [(channels, n), (channels, n)])
        return objective_from_logits(logits_fixed, logits_moving, fixed, moving, settings).total

    point = 3.0 * rng.normal(size=2 * channels * n)
    return OpCheck(OBJECTIVE_NAME, function, point, tol=OBJECTIVE_TOLERANCE)


def gradcheck_all(
    output_path: Optional[Union[str, Path]] = None,
    tol: float = DEFAULT_TOLERANCE,
    seed: int = 0,
    progress: bool = False
) -> List[GradCheckReport]:
    """全登録演算と合成目的関数を検証し、必要なら gradcheck.csv を書き出す。

    Returns:
        演算ごとの GradCheckReport（最後が合成目的関数）
    """
    reports = []
    checks = [*registered_checks(seed), objective_check(seed)]
    for check in tqdm(checks, desc="gradcheck", unit="op", disable=not progress):
        report = grad_check(
            check.function, check.point, h=check.step,
            tol=tol if check.tol is None else check.tol, name=check.name
        )
        log = logger.info if report.passed else logger.error
        log(str(report))
        reports.append(report)

    failed = [r.op for r in reports if not r.passed]
    if failed:
        logger.error(f"Gradient check failed for: {', '.join(failed)}")
    else:
        logger.info(f"All {len(reports)} gradient checks passed")

    if output_path is not None:
        write_gradcheck_csv([r.to_row() for r in reports], output_path)
    return reports

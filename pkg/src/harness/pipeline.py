"""1ペア分の学習目的関数（順伝播 → 正規化 → モーメント → フィット → ワープ → 損失）。"""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence
import logging

from ..align.fitting import fit_affine_node, fit_rigid_node
from ..autodiff import DiffNode, ops
from ..keypoints.losses import keypoint_losses, total_loss_node
from ..models.field import Volume
from ..models.keypoint import LossReport, LossWeights
from ..network.model import FeatureExtractor
from ..warp.resample import resample_node
from ..warp.similarity import similarity_node

if TYPE_CHECKING:
    from ..config import Config

logger = logging.getLogger(__name__)


@dataclass
class ObjectiveSettings:
    """目的関数の組み立てに必要な設定。"""
    weights: LossWeights
    task: str = "rigid"
    kl_mode: str = "normalised"
    var_norm: str = "rms"
    similarity: str = "mse"
    detach_gaussian_params: bool = False
    rigid_singular_ratio: float = 1e-9
    affine_max_condition: float = 1e8

    @classmethod
    def from_config(cls, cfg: "Config") -> "ObjectiveSettings":
        return cls(
            weights=cfg.weights,
            task=cfg.task,
            kl_mode=cfg.kl_mode,
            var_norm=cfg.var_norm,
            similarity=cfg.similarity,
            detach_gaussian_params=cfg.detach_gaussian_params,
            rigid_singular_ratio=cfg.rigid_singular_ratio,
            affine_max_condition=cfg.affine_max_condition
        )


@dataclass
class PairObjective:
    """1ペア分の目的関数ノードと各項の値。"""
    total: DiffNode
    report: LossReport
    transform: DiffNode


def fit_node(mu_moving: DiffNode, mu_fixed: DiffNode, settings: ObjectiveSettings) -> DiffNode:
    """課題に応じた閉形式フィット。"""
    if settings.task == "affine":
        return fit_affine_node(mu_moving, mu_fixed, settings.affine_max_condition)
    return fit_rigid_node(mu_moving, mu_fixed, settings.rigid_singular_ratio)


def objective_from_logits(
    logits_fixed: DiffNode,
    logits_moving: DiffNode,
    fixed: Volume,
    moving: Volume,
    settings: ObjectiveSettings
) -> PairObjective:
    """両ボリュームのロジットから目的関数を組み立てる。

    正則化項は固定側と移動側の平均を取る。

    Raises:
        DegenerateConfigurationError / CoplanarConfigurationError: フィットが退化した場合
        NonFiniteLossError: 損失項が有限でない場合
    """
    grid = fixed.grid
    coords = grid.coordinates()
    w = settings.weights

    mu_f, kl_f, var_f, rep_f, _ = keypoint_losses(
        logits_fixed, coords, w.tau, settings.kl_mode, settings.var_norm,
        settings.detach_gaussian_params
    )
    mu_m, kl_m, var_m, rep_m, _ = keypoint_losses(
        logits_moving, coords, w.tau, settings.kl_mode, settings.var_norm,
        settings.detach_gaussian_params
    )

    transform = fit_node(mu_m, mu_f, settings)
    moved = resample_node(moving.data, transform, grid)
    sim = similarity_node(fixed.flat(), moved, settings.similarity)

    kl = ops.scale(ops.add(kl_f, kl_m), 0.5)
    var = ops.scale(ops.add(var_f, var_m), 0.5)
    rep = ops.scale(ops.add(rep_f, rep_m), 0.5)
    total, report = total_loss_node(sim, kl, var, rep, w)
    return PairObjective(total=total, report=report, transform=transform)


def pair_objective(
    model: FeatureExtractor,
    params: Sequence[DiffNode],
    fixed: Volume,
    moving: Volume,
    settings: ObjectiveSettings
) -> PairObjective:
    """共有パラメータで両ボリュームを順伝播し目的関数を組み立てる。"""
    logits_fixed = model.forward_node(fixed.data, params)
    logits_moving = model.forward_node(moving.data, params)
    return objective_from_logits(logits_fixed, logits_moving, fixed, moving, settings)


def mean_report(reports: Sequence[LossReport]) -> LossReport:
    """バッチ内の LossReport を項ごとに平均する。"""
    n = len(reports)
    return LossReport(
        l_sim=sum(r.l_sim for r in reports) / n,
        l_kl=sum(r.l_kl for r in reports) / n,
        l_var=sum(r.l_var for r in reports) / n,
        l_rep=sum(r.l_rep for r in reports) / n,
        total=sum(r.total for r in reports) / n,
        kl_negative=any(r.kl_negative for r in reports)
    )

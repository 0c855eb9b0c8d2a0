"""特徴の空間正則化損失（KL・分散・反発）と学習目的関数。"""

from typing import List, Optional, Sequence, Tuple
import logging
import math

import numpy as np

from ..autodiff import DiffNode, constant, detach, ops
from ..models.field import FeatureStack, Grid, PointCloud
from ..models.keypoint import COVARIANCE_RIDGE, Keypoint, LossReport, LossWeights
from .moments import feature_moments, gaussian_log_density

logger = logging.getLogger(__name__)

# F_k(X) がこの値未満のボクセルは x log x → 0 として寄与しない
KL_SUPPORT_THRESHOLD = 1e-30

KL_MODES = ("normalised", "density")
VAR_NORMS = ("rms", "frobenius")


class NonFiniteLossError(Exception):
    """損失項が有限でない。"""
    pass


def kl_divergence(
    features: DiffNode,
    log_features: DiffNode,
    mu: DiffNode,
    sigma: DiffNode,
    coords: np.ndarray,
    mode: str = "normalised",
    detach_gaussian_params: bool = False,
    eps: float = COVARIANCE_RIDGE
) -> DiffNode:
    """(1/K)(1/|Ω|) Σ_k Σ_X F_k(X)[log F_k(X) − log N(X|μ_k,Σ_k)]。

    Args:
        features: (K, N) の正規化済み特徴
        log_features: log F（ソフトマックスなら log_softmax を渡す）
        mu: (K, 3)
        sigma: (K, 3, 3)
        coords: (N, 3)
        mode: "normalised" または "density"
        detach_gaussian_params: Gaussian 内の μ, Σ への勾配を止める
        eps: 共分散リッジ

    Returns:
        スカラーノード
    """
    if mode not in KL_MODES:
        raise ValueError(f"Unknown KL mode: {mode}")
    if detach_gaussian_params:
        mu, sigma = detach(mu), detach(sigma)
    k, n = features.shape
    log_q = gaussian_log_density(mu, sigma, coords, mode, eps)
    support = (features.value >= KL_SUPPORT_THRESHOLD).astype(np.float64)
    integrand = ops.mul(ops.mul(features, ops.sub(log_features, log_q)), support)
    return ops.scale(ops.reduce_sum(integrand), 1.0 / (k * n))


def variance_penalty(sigma: DiffNode, norm: str = "rms") -> DiffNode:
    """(1/K) Σ_k ‖Σ_k‖（rms は Frobenius/3、frobenius は √Tr(ΣΣᵀ)）。"""
    if norm not in VAR_NORMS:
        raise ValueError(f"Unknown var_norm: {norm}")
    squared = ops.square(sigma)
    per_channel = (
        ops.reduce_mean(squared, axis=(1, 2)) if norm == "rms"
        else ops.reduce_sum(squared, axis=(1, 2))
    )
    return ops.reduce_mean(ops.sqrt(per_channel))


def repulsion_penalty(mu: DiffNode, tau: float) -> DiffNode:
    """(2/(K(K−1))) Σ_{k'>k} −log σ(‖μ_k − μ_k'‖ / τ)。"""
    if mu.shape[0] < 2:
        logger.warning("Repulsive loss needs at least two keypoints; returning 0")
        return constant(0.0)
    distances = ops.pairwise_distances(mu)
    return ops.neg(ops.reduce_mean(ops.log_sigmoid(ops.scale(distances, 1.0 / tau))))


def _stack_keypoints(kps: Sequence[Keypoint]) -> Tuple[DiffNode, DiffNode]:
    mu = constant(np.stack([kp.mu for kp in kps]))
    sigma = constant(np.stack([kp.sigma for kp in kps]))
    return mu, sigma


def loss_kl(
    features: FeatureStack,
    kps: Sequence[Keypoint],
    grid: Optional[Grid] = None,
    mode: str = "normalised"
) -> float:
    """正規化済み特徴スタックとキーポイントから L_KL を求める。

    density モードでは負値になり得る（警告を出す）。
    """
    grid = grid or features.grid
    f = features.data
    log_f = np.log(np.maximum(f, np.finfo(np.float64).tiny))
    mu, sigma = _stack_keypoints(kps)
    value = float(kl_divergence(
        constant(f), constant(log_f), mu, sigma, grid.coordinates(), mode
    ).value)
    if mode == "density" and value < 0.0:
        logger.warning(f"Density-mode KL is negative ({value:.6g})")
    return value


def loss_var(kps: Sequence[Keypoint], norm: str = "rms") -> float:
    """L_var（既定は 1/9 付きの rms 形式）。"""
    _, sigma = _stack_keypoints(kps)
    return float(variance_penalty(sigma, norm).value)


def loss_rep(mus: PointCloud, tau: float) -> float:
    """L_rep。K < 2 では警告付きで0。"""
    if tau <= 0.0:
        raise ValueError(f"tau must be positive: {tau}")
    return float(repulsion_penalty(constant(mus.points), tau).value)


def _check_terms(terms: dict) -> None:
    for name, value in terms.items():
        if not math.isfinite(float(value)):
            raise NonFiniteLossError(f"Loss term '{name}' is not finite: {value}")


def total_loss(
    sim: float,
    kl: float,
    var: float,
    rep: float,
    w: LossWeights
) -> LossReport:
    """目的関数 sim + λ_KL·kl + λ_var·var + λ_rep·rep。"""
    _check_terms({"sim": sim, "kl": kl, "var": var, "rep": rep})
    total = sim + w.lambda_kl * kl + w.lambda_var * var + w.lambda_rep * rep
    return LossReport(
        l_sim=float(sim),
        l_kl=float(kl),
        l_var=float(var),
        l_rep=float(rep),
        total=float(total),
        kl_negative=bool(kl < 0.0)
    )


def total_loss_node(
    sim: DiffNode,
    kl: DiffNode,
    var: DiffNode,
    rep: DiffNode,
    w: LossWeights
) -> Tuple[DiffNode, LossReport]:
    """グラフ上で目的関数を組み立て、同じ値の LossReport も返す。"""
    report = total_loss(sim.item(), kl.item(), var.item(), rep.item(), w)
    total = ops.linear_combination(
        [sim, kl, var, rep],
        [1.0, w.lambda_kl, w.lambda_var, w.lambda_rep]
    )
    return total, report


def keypoint_losses(
    logits: DiffNode,
    coords: np.ndarray,
    tau: float,
    kl_mode: str = "normalised",
    var_norm: str = "rms",
    detach_gaussian_params: bool = False
) -> Tuple[DiffNode, DiffNode, DiffNode, DiffNode, DiffNode]:
    """ロジットから (μ, L_KL, L_var, L_rep, Σ) をグラフ上で計算する。

    Args:
        logits: (K, N) のロジット（x 最速）
        coords: (N, 3)
        tau: 反発損失の温度
        kl_mode: KL の Gaussian 規約
        var_norm: 分散ペナルティのノルム
        detach_gaussian_params: Gaussian 内の μ, Σ への勾配を止める

    Returns:
        (mu, kl, var, rep, sigma)
    """
    features = ops.spatial_softmax(logits)
    log_features = ops.log_softmax(logits)
    mu, sigma = feature_moments(features, coords)
    kl = kl_divergence(
        features, log_features, mu, sigma, coords, kl_mode, detach_gaussian_params
    )
    var = variance_penalty(sigma, var_norm)
    rep = repulsion_penalty(mu, tau)
    return mu, kl, var, rep, sigma


def loss_kl_both(features: FeatureStack, kps: List[Keypoint]) -> Tuple[float, float]:
    """normalised / density 両規約の L_KL を返す。"""
    return loss_kl(features, kps, mode="normalised"), loss_kl(features, kps, mode="density")

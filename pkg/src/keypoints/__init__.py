"""確率的キーポイントと空間正則化損失のモジュール。"""

from .moments import (
    NormalizationError,
    normalize_features,
    center_of_mass,
    covariance,
    discretized_gaussian,
    extract_keypoints,
    feature_moments,
    gaussian_log_density,
)
from .losses import (
    NonFiniteLossError,
    KL_MODES,
    VAR_NORMS,
    kl_divergence,
    variance_penalty,
    repulsion_penalty,
    keypoint_losses,
    loss_kl,
    loss_kl_both,
    loss_var,
    loss_rep,
    total_loss,
    total_loss_node,
)

__all__ = [
    "NormalizationError",
    "normalize_features",
    "center_of_mass",
    "covariance",
    "discretized_gaussian",
    "extract_keypoints",
    "feature_moments",
    "gaussian_log_density",
    "NonFiniteLossError",
    "KL_MODES",
    "VAR_NORMS",
    "kl_divergence",
    "variance_penalty",
    "repulsion_penalty",
    "keypoint_losses",
    "loss_kl",
    "loss_kl_both",
    "loss_var",
    "loss_rep",
    "total_loss",
    "total_loss_node",
]

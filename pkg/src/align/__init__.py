"""閉形式の点群位置合わせと変換代数のモジュール。"""

from .fitting import (
    DegenerateConfigurationError,
    CoplanarConfigurationError,
    DEFAULT_SINGULAR_RATIO,
    DEFAULT_MAX_CONDITION,
    fit_rigid,
    fit_affine,
    fit_rigid_node,
    fit_affine_node,
    fit_residual,
)
from .transforms import (
    SingularTransformError,
    compose,
    invert,
    apply_point,
    rotation_error,
    translation_error,
    matrix_error,
)

__all__ = [
    "DegenerateConfigurationError",
    "CoplanarConfigurationError",
    "DEFAULT_SINGULAR_RATIO",
    "DEFAULT_MAX_CONDITION",
    "fit_rigid",
    "fit_affine",
    "fit_rigid_node",
    "fit_affine_node",
    "fit_residual",
    "SingularTransformError",
    "compose",
    "invert",
    "apply_point",
    "rotation_error",
    "translation_error",
    "matrix_error",
]

"""リバースモード自動微分モジュール。"""

from .node import (
    DiffNode,
    GradientMap,
    GradientError,
    backward,
    leaf,
    constant,
    detach,
    as_node,
)
from .gradcheck import GradCheckReport, grad_check, numeric_gradient
from . import ops

__all__ = [
    "DiffNode",
    "GradientMap",
    "GradientError",
    "backward",
    "leaf",
    "constant",
    "detach",
    "as_node",
    "GradCheckReport",
    "grad_check",
    "numeric_gradient",
    "ops",
]

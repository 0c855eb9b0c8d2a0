"""微分可能なボリュームワープと類似度損失のモジュール。"""

from .resample import resample, resample_node
from .similarity import (
    NCC_EPSILON,
    GridMismatchError,
    SimilarityKind,
    interior_mask,
    mse_node,
    ncc_node,
    similarity,
    similarity_node,
)

__all__ = [
    "resample",
    "resample_node",
    "NCC_EPSILON",
    "GridMismatchError",
    "SimilarityKind",
    "interior_mask",
    "mse_node",
    "ncc_node",
    "similarity",
    "similarity_node",
]

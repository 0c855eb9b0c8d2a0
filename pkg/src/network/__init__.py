"""シャム特徴抽出ネットワークのモジュール。"""

from .model import (
    ConvLayer,
    FeatureExtractor,
    ModelConfig,
    SiameseKeypoints,
    init_parameters,
    siamese_keypoints,
)

__all__ = [
    "ConvLayer",
    "FeatureExtractor",
    "ModelConfig",
    "SiameseKeypoints",
    "init_parameters",
    "siamese_keypoints",
]

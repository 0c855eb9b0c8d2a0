"""評価指標の集計モデル。"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

# metrics.csv の列順（固定）
METRICS_COLUMNS = [
    "arm",
    "rot_err_mean", "rot_err_sd",
    "trans_err_mean", "trans_err_sd",
    "kl_mean", "kl_sd",
    "specnorm_mean", "specnorm_sd",
    "pointdist_mean", "pointdist_sd",
]


@dataclass
class PairMetrics:
    """1ペア分の評価値。"""
    rotation_error_deg: float
    translation_error_vox: float
    feature_kl: float
    feature_kl_alt: float
    spectral_norm: float
    mean_point_distance_vox: float
    matrix_error: Optional[float] = None


@dataclass
class MetricsRow:
    """評価セット全体の平均と標準偏差。

    標準偏差は母標準偏差（ddof=0）。
    """
    rotation_error_deg: float
    rotation_error_sd: float
    translation_error_vox: float
    translation_error_sd: float
    feature_kl: float
    feature_kl_sd: float
    spectral_norm: float
    spectral_norm_sd: float
    mean_point_distance_vox: float
    mean_point_distance_sd: float
    feature_kl_alt: float = 0.0
    feature_kl_alt_sd: float = 0.0
    matrix_error: Optional[float] = None
    matrix_error_sd: Optional[float] = None
    n_pairs: int = 0

    @classmethod
    def aggregate(cls, pairs: List[PairMetrics]) -> "MetricsRow":
        """ペアごとの評価値を集計する。

        Args:
            pairs: 評価値のリスト（1件以上）

        Returns:
            MetricsRow
        """
        if not pairs:
            raise ValueError("Cannot aggregate an empty evaluation set")

        def stats(values):
            arr = np.asarray(values, dtype=np.float64)
            return float(arr.mean()), float(arr.std())

        rot = stats([p.rotation_error_deg for p in pairs])
        trans = stats([p.translation_error_vox for p in pairs])
        kl = stats([p.feature_kl for p in pairs])
        kl_alt = stats([p.feature_kl_alt for p in pairs])
        spec = stats([p.spectral_norm for p in pairs])
        dist = stats([p.mean_point_distance_vox for p in pairs])

        matrix = (None, None)
        if all(p.matrix_error is not None for p in pairs):
            matrix = stats([p.matrix_error for p in pairs])

        return cls(
            rotation_error_deg=rot[0], rotation_error_sd=rot[1],
            translation_error_vox=trans[0], translation_error_sd=trans[1],
            feature_kl=kl[0], feature_kl_sd=kl[1],
            spectral_norm=spec[0], spectral_norm_sd=spec[1],
            mean_point_distance_vox=dist[0], mean_point_distance_sd=dist[1],
            feature_kl_alt=kl_alt[0], feature_kl_alt_sd=kl_alt[1],
            matrix_error=matrix[0], matrix_error_sd=matrix[1],
            n_pairs=len(pairs)
        )

    def to_csv_row(self, arm: str) -> dict:
        """metrics.csv の1行に変換する。"""
        return {
            "arm": arm,
            "rot_err_mean": self.rotation_error_deg,
            "rot_err_sd": self.rotation_error_sd,
            "trans_err_mean": self.translation_error_vox,
            "trans_err_sd": self.translation_error_sd,
            "kl_mean": self.feature_kl,
            "kl_sd": self.feature_kl_sd,
            "specnorm_mean": self.spectral_norm,
            "specnorm_sd": self.spectral_norm_sd,
            "pointdist_mean": self.mean_point_distance_vox,
            "pointdist_sd": self.mean_point_distance_sd,
        }

    def is_finite(self) -> bool:
        values = [v for v in self.to_csv_row("").values() if not isinstance(v, str)]
        return bool(np.all(np.isfinite(values)))

"""確率的キーポイントと損失関連のデータモデル。"""

from dataclasses import dataclass, asdict
from typing import Optional
import math

import numpy as np

# 共分散のリッジ（ボクセル²）
COVARIANCE_RIDGE = 1e-4


@dataclass
class Keypoint:
    """特徴マップの重心 μ と 3x3 共分散 Σ。"""
    mu: np.ndarray
    sigma: np.ndarray
    mass: Optional[float] = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(3, 3)

    def is_symmetric(self, tol: float = 1e-9) -> bool:
        """Σ が対称かを確認する。"""
        return bool(np.max(np.abs(self.sigma - self.sigma.T)) <= tol)

    def spectral_norm(self) -> float:
        """Σ の最大固有値。"""
        return float(np.linalg.eigvalsh(self.sigma)[-1])

    def regularized_sigma(self, eps: float = COVARIANCE_RIDGE) -> np.ndarray:
        """Σ + εI。"""
        return self.sigma + eps * np.eye(3)


@dataclass
class LossWeights:
    """学習目的関数の重みと反発損失の温度 τ。"""
    lambda_kl: float = 1.0
    lambda_var: float = 1e-2
    lambda_rep: float = 1e-3
    tau: float = 1e-1

    def validate(self) -> list:
        """重みを検証する。

        Returns:
            検証エラーのリスト（有効な場合は空）
        """
        errors = []
        for name in ("lambda_kl", "lambda_var", "lambda_rep"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                errors.append(f"{name} must be finite and non-negative: {value}")
        if not math.isfinite(self.tau) or self.tau <= 0.0:
            errors.append(f"tau must be positive: {self.tau}")
        return errors

    def masked(self, use_kl: bool, use_var: bool, use_rep: bool) -> "LossWeights":
        """指定した項以外の λ をゼロにした重みを返す。"""
        return LossWeights(
            lambda_kl=self.lambda_kl if use_kl else 0.0,
            lambda_var=self.lambda_var if use_var else 0.0,
            lambda_rep=self.lambda_rep if use_rep else 0.0,
            tau=self.tau
        )


@dataclass
class LossReport:
    """各損失項と重み付き総和。"""
    l_sim: float
    l_kl: float
    l_var: float
    l_rep: float
    total: float
    kl_negative: bool = False

    def to_record(self, step: int) -> dict:
        """losses.jsonl の1行分の辞書に変換する。"""
        return {
            "step": step,
            "sim": self.l_sim,
            "kl": self.l_kl,
            "var": self.l_var,
            "rep": self.l_rep,
            "total": self.total,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    def __str__(self) -> str:
        return (
            f"total={self.total:.6g} (sim={self.l_sim:.6g}, kl={self.l_kl:.6g}, "
            f"var={self.l_var:.6g}, rep={self.l_rep:.6g})"
        )

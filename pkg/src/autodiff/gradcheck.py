"""中心差分による解析勾配の検証。"""

from dataclasses import dataclass, field
from typing import Callable, Optional
import logging

import numpy as np

from .node import DiffNode, GradientError, backward, constant, leaf

logger = logging.getLogger(__name__)

# 葉ノードを受け取りスカラーノードを返す関数
DiffFunction = Callable[[DiffNode], DiffNode]


@dataclass
class GradCheckReport:
    """勾配検証の結果。"""
    op: str
    max_rel_err: float
    passed: bool
    tolerance: float
    rel_errors: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    analytic: Optional[np.ndarray] = field(default=None, repr=False)
    numeric: Optional[np.ndarray] = field(default=None, repr=False)

    def to_row(self) -> dict:
        """gradcheck.csv の1行に変換する。"""
        return {"op": self.op, "max_rel_err": self.max_rel_err, "pass": self.passed}

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.op}: max_rel_err={self.max_rel_err:.3e} (tol {self.tolerance:g})"


def _evaluate(f: DiffFunction, x: np.ndarray) -> float:
    value = f(constant(x)).value
    if value.size != 1:
        raise GradientError(f"grad_check needs a scalar function, got shape {value.shape}")
    value = float(value.reshape(-1)[0])
    if not np.isfinite(value):
        raise GradientError("Function is not finite at an evaluation point")
    return value


def numeric_gradient(f: DiffFunction, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """座標ごとの中心差分 (f(x+h) − f(x−h)) / 2h。"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        original = x.flat[i]
        x.flat[i] = original + h
        f_plus = _evaluate(f, x)
        x.flat[i] = original - h
        f_minus = _evaluate(f, x)
        x.flat[i] = original
        grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def analytic_gradient(f: DiffFunction, x: np.ndarray) -> np.ndarray:
    """逆伝播による勾配。"""
    node = leaf(np.array(x, dtype=np.float64), name="x")
    return backward(f(node))[node]


def grad_check(
    f: DiffFunction,
    x: np.ndarray,
    h: float = 1e-4,
    tol: float = 1e-4,
    name: str = "f"
) -> GradCheckReport:
    """解析勾配と中心差分を比較する。

    相対誤差は |analytic − numeric| / max(1, |numeric|)。

    Args:
        f: 葉ノードからスカラーノードへの関数
        x: 評価点
        h: 差分ステップ
        tol: 相対誤差の許容値
        name: レポートに記録する演算名

    Returns:
        GradCheckReport
    """
    analytic = analytic_gradient(f, x)
    numeric = numeric_gradient(f, x, h)
    rel_errors = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    max_rel_err = float(rel_errors.max()) if rel_errors.size else 0.0
    report = GradCheckReport(
        op=name,
        max_rel_err=max_rel_err,
        passed=bool(max_rel_err < tol),
        tolerance=tol,
        rel_errors=rel_errors,
        analytic=analytic,
        numeric=numeric
    )
    logger.debug(str(report))
    return report

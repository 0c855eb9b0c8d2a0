"""適応的モーメント推定（Adam）によるパラメータ更新。"""

from dataclasses import dataclass, asdict
from typing import List, Sequence
import logging
import math

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class AdamConfig:
    """Adam のハイパーパラメータ。"""
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def validate(self) -> List[str]:
        errors = []
        if not math.isfinite(self.learning_rate) or self.learning_rate <= 0.0:
            errors.append(f"optimizer.learning_rate must be positive: {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                errors.append(f"optimizer.{name} must be in [0, 1): {value}")
        if self.epsilon <= 0.0:
            errors.append(f"optimizer.epsilon must be positive: {self.epsilon}")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """バイアス補正付き Adam。

    パラメータ配列をその場で更新する。
    """

    def __init__(self, shapes: Sequence[tuple], config: AdamConfig):
        self.config = config
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params: List[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """1ステップ更新する。

        Args:
            params: 更新対象の配列（その場で書き換える）
            grads: 同じ順序の勾配
        """
        if len(params) != len(grads) or len(params) != len(self.m):
            raise ValueError(
                f"Adam expects {len(self.m)} parameter/gradient pairs, "
                f"got {len(params)}/{len(grads)}"
            )
        c = self.config
        self.t += 1
        correction1 = 1.0 - c.beta1 ** self.t
        correction2 = 1.0 - c.beta2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            p -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.epsilon)

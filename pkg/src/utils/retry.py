"""上限付きの再試行（再抽選）ユーティリティ。"""

from typing import Callable, Optional, Tuple, Type, TypeVar
import logging

logger = logging.getLogger(__name__)

T = TypeVar("T")


class RetryState:
    """再試行の状態トラッカー。"""

    def __init__(self, max_retries: int = 100):
        """再試行状態を初期化する。

        Args:
            max_retries: 最大試行回数
        """
        self.max_retries = max_retries
        self.attempt = 0
        self.last_error: Optional[Exception] = None

    def should_retry(self) -> bool:
        """さらに試行可能かを確認する。"""
        return self.attempt < self.max_retries

    def record_attempt(self, error: Optional[Exception] = None) -> None:
        """試行を記録する。

        Args:
            error: 試行中のエラー（もしあれば）
        """
        self.attempt += 1
        if error:
            self.last_error = error


def retry_until_valid(
    draw: Callable[[int], T],
    max_retries: int = 100,
    exceptions: Tuple[Type[Exception], ...] = (ValueError,),
    label: str = "draw"
) -> Tuple[T, int]:
    """draw が例外を出さなくなるまで再試行する。

    Args:
        draw: 試行番号を受け取り結果を返す関数（不適なら exceptions を送出）
        max_retries: 最大試行回数
        exceptions: 再試行の対象とする例外
        label: ログ用の名前

    Returns:
        (結果, 使用した試行回数)

    Raises:
        RuntimeError: 全ての試行が失敗した場合（最後の例外を連鎖）
    """
    state = RetryState(max_retries)
    while state.should_retry():
        try:
            result = draw(state.attempt)
        except exceptions as e:
            state.record_attempt(e)
            logger.debug(f"{label} attempt {state.attempt}/{max_retries} rejected: {e}")
            continue
        state.record_attempt()
        if state.attempt > 1:
            logger.warning(f"{label} accepted after {state.attempt} attempts")
        return result, state.attempt

    raise RuntimeError(
        f"{label} failed after {max_retries} attempts: {state.last_error}"
    ) from state.last_error

"""ロギング設定モジュール。"""

import logging
import sys
import time
from pathlib import Path
from typing import Optional

DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(
    level: str = "INFO",
    log_file: Optional[str] = None,
    format_string: Optional[str] = None
) -> logging.Logger:
    """ルートロガーに標準出力と（任意で）ファイルのハンドラーを設定する。

    Args:
        level: ログレベル（DEBUG, INFO, WARNING, ERROR, CRITICAL）
        log_file: ログファイルへのパス（省略可）
        format_string: カスタムフォーマット文字列（省略可）

    Returns:
        ルートロガー
    """
    log_level = getattr(logging, level.upper(), logging.INFO)
    formatter = logging.Formatter(format_string or DEFAULT_FORMAT)

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_path, encoding="utf-8")
        file_handler.setLevel(log_level)
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)

    return root_logger


class ProgressLogger:
    """学習ステップなどの進捗をログ出力するヘルパー。"""

    def __init__(
        self,
        total: int,
        logger: Optional[logging.Logger] = None,
        log_interval: int = 10,
        unit: str = "steps"
    ):
        """進捗ロガーを初期化する。

        Args:
            total: 総数
            logger: 使用するロガー
            log_interval: 進捗出力の間隔
            unit: ログに表示する単位
        """
        self.total = max(int(total), 0)
        self.current = 0
        self.logger = logger or logging.getLogger(__name__)
        self.log_interval = max(int(log_interval), 1)
        self.unit = unit
        self._start = time.perf_counter()

    def update(self, message: Optional[str] = None) -> None:
        """進捗を1つ進める。

        Args:
            message: 含めるメッセージ（省略可）
        """
        self.current += 1
        if self.current % self.log_interval != 0 and self.current != self.total:
            return
        progress = self.current / self.total * 100 if self.total else 100.0
        elapsed = time.perf_counter() - self._start
        msg = f"Progress: {self.current}/{self.total} ({progress:.1f}%) [{elapsed:.1f}s]"
        if message:
            msg += f" - {message}"
        self.logger.info(msg)

    def complete(self, message: str = "Complete") -> None:
        """完了をログ出力する。"""
        elapsed = time.perf_counter() - self._start
        self.logger.info(f"{message}: {self.current} {self.unit} in {elapsed:.1f}s")

"""ユーティリティモジュール。"""

from .logger import setup_logging, ProgressLogger
from .retry import RetryState, retry_until_valid

__all__ = ["setup_logging", "ProgressLogger", "RetryState", "retry_until_valid"]

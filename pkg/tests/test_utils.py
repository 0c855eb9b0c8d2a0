"""ロギングと再抽選ユーティリティのテスト。"""

import logging

import pytest

from src.utils import ProgressLogger, retry_until_valid


class TestRetryUntilValid:
    """retry_until_valid のテスト。"""

    def test_returns_first_valid(self):
        """不適な試行を読み飛ばし、試行回数を返す。"""
        def draw(attempt):
            if attempt < 2:
                raise ValueError("outside margin")
            return attempt * 10

        assert retry_until_valid(draw, max_retries=5) == (20, 3)

    def test_exhausted(self):
        """上限まで失敗すると最後の例外を連鎖して RuntimeError。"""
        def draw(attempt):
            raise ValueError(f"attempt {attempt}")

        with pytest.raises(RuntimeError) as excinfo:
            retry_until_valid(draw, max_retries=4)
        assert "attempt 3" in str(excinfo.value.__cause__)

    def test_other_exceptions_propagate(self):
        """対象外の例外はそのまま送出する。"""
        def draw(attempt):
            raise KeyError("boom")

        with pytest.raises(KeyError):
            retry_until_valid(draw, max_retries=3)


class TestProgressLogger:
    """ProgressLogger のテスト。"""

    def test_logs_at_interval(self, caplog):
        """間隔ごとと最後にだけ出力する。"""
        logger = logging.getLogger("tests.progress")
        progress = ProgressLogger(5, logger, log_interval=2)
        with caplog.at_level(logging.INFO, logger="tests.progress"):
            for _ in range(5):
                progress.update("ok")
            progress.complete("Done")
        messages = [r.getMessage() for r in caplog.records]
        assert [m.split(" ")[1] for m in messages[:-1]] == ["2/5", "4/5", "5/5"]
        assert messages[-1].startswith("Done: 5 steps")

"""実験成果物（metrics.csv / metrics.json / losses.jsonl / gradcheck.csv）の出力。"""

from pathlib import Path
from typing import Dict, Iterable, List, Union
import json
import logging

import pandas as pd

from ..models.keypoint import LossReport
from ..models.metrics import METRICS_COLUMNS, MetricsRow
from .schemas import LossRecord

logger = logging.getLogger(__name__)

# 繰り返し実行でバイト一致させるための固定書式
FLOAT_FORMAT = "%.10g"

GRADCHECK_COLUMNS = ["op", "max_rel_err", "pass"]


def write_metrics_csv(rows: Dict[str, MetricsRow], path: Union[str, Path]) -> Path:
    """アームごとの MetricsRow を固定ヘッダーの CSV に書き出す。

    Args:
        rows: アーム名から MetricsRow への対応（挿入順に出力）
        path: 出力パス

    Returns:
        出力パス
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [row.to_csv_row(arm) for arm, row in rows.items()],
        columns=METRICS_COLUMNS
    )
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Metrics written: {path} ({len(frame)} rows)")
    return path


def read_metrics_csv(path: Union[str, Path]) -> pd.DataFrame:
    """metrics.csv を読み込む（arm 列をインデックスにする）。"""
    frame = pd.read_csv(path)
    if list(frame.columns) != METRICS_COLUMNS:
        raise ValueError(f"Unexpected metrics header in {path}: {list(frame.columns)}")
    return frame.set_index("arm")


def write_metrics_json(document: dict, path: Union[str, Path]) -> Path:
    """両 KL 規約や各アームの構成を含む詳細版を書き出す。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
    return path


class LossLog:
    """losses.jsonl への逐次書き込み。"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")
        self.count = 0

    def append(self, step: int, report: LossReport) -> None:
        """1ステップ分の LossReport を追記する。"""
        record = LossRecord(**report.to_record(step))
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(record.model_dump_json() + "\n")
        self.count += 1


def read_loss_log(path: Union[str, Path]) -> List[LossRecord]:
    """losses.jsonl を読み込む。"""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(LossRecord.model_validate_json(line))
    return records


def write_gradcheck_csv(rows: Iterable[dict], path: Union[str, Path]) -> Path:
    """勾配検証の結果を `op,max_rel_err,pass` の CSV に書き出す。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=GRADCHECK_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.6e", lineterminator="\n")
    return path

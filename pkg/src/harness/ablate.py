"""正則化項のアブレーション（5アーム）と方向性チェック。"""

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple, Union
import copy
import logging

from ..io.reports import write_metrics_csv, write_metrics_json
from ..models.keypoint import LossWeights
from ..models.metrics import MetricsRow
from ..synth.dataset import content_hash
from ..synth.generator import SyntheticPair, make_dataset
from .evaluate import evaluate
from .train import train

if TYPE_CHECKING:
    from ..config import Config

logger = logging.getLogger(__name__)

METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.json"

# アーム名 → (KL, var, rep) の有効化パターン
ARMS: "OrderedDict[str, Tuple[bool, bool, bool]]" = OrderedDict([
    ("baseline", (False, False, False)),
    ("kl", (True, False, False)),
    ("var", (False, True, False)),
    ("kl_var", (True, True, False)),
    ("full", (True, True, True)),
])


def arm_weights(base: LossWeights) -> "OrderedDict[str, LossWeights]":
    """各アームの重み（指定以外の λ をゼロにする）。"""
    return OrderedDict(
        (name, base.masked(*pattern)) for name, pattern in ARMS.items()
    )


@dataclass
class TrendCheck:
    """1つの方向性チェックの結果。"""
    name: str
    passed: bool
    detail: str


@dataclass
class AblationResult:
    """アブレーションの成果物。"""
    table: "OrderedDict[str, MetricsRow]"
    eval_hash: str
    metrics_csv: Path
    metrics_json: Path
    trends: List[TrendCheck] = field(default_factory=list)


def _mean(values: List[float]) -> float:
    return sum(values) / len(values)


def check_trends(table: Dict[str, MetricsRow]) -> List[TrendCheck]:
    """アーム間の方向性を確認する。

    - full の回転誤差 < baseline
    - var を含むアームの平均スペクトルノルム × 2 ≤ 含まないアームの平均
    - full の平均点間距離 > kl_var
    - KL を含むアームの平均 feature_kl × 2 ≤ baseline
    """
    checks = []

    full, base = table["full"], table["baseline"]
    checks.append(TrendCheck(
        "rotation_error",
        full.rotation_error_deg < base.rotation_error_deg,
        f"full {full.rotation_error_deg:.4g} vs baseline {base.rotation_error_deg:.4g} deg"
    ))

    with_var = _mean([table[n].spectral_norm for n, p in ARMS.items() if p[1]])
    without_var = _mean([table[n].spectral_norm for n, p in ARMS.items() if not p[1]])
    checks.append(TrendCheck(
        "spectral_norm",
        2.0 * with_var <= without_var,
        f"with var {with_var:.4g} vs without var {without_var:.4g}"
    ))

    no_rep = table["kl_var"]
    checks.append(TrendCheck(
        "point_distance",
        full.mean_point_distance_vox > no_rep.mean_point_distance_vox,
        f"full {full.mean_point_distance_vox:.4g} vs kl_var {no_rep.mean_point_distance_vox:.4g} vox"
    ))

    with_kl = _mean([table[n].feature_kl for n, p in ARMS.items() if p[0]])
    checks.append(TrendCheck(
        "feature_kl",
        2.0 * with_kl <= base.feature_kl,
        f"with KL {with_kl:.4g} vs baseline {base.feature_kl:.4g}"
    ))

    for check in checks:
        log = logger.info if check.passed else logger.warning
        log(f"Trend {check.name}: {'PASS' if check.passed else 'FAIL'} ({check.detail})")
    return checks


def ablate(
    base_cfg: "Config",
    output_dir: Optional[Union[str, Path]] = None,
    train_set: Optional[List[SyntheticPair]] = None,
    eval_set: Optional[List[SyntheticPair]] = None
) -> AblationResult:
    """5アームを学習・評価し metrics.csv / metrics.json を書き出す。

    全アームで同じ学習ペア・評価ペア・モデル初期値を共有する。
    """
    output_dir = Path(output_dir or base_cfg.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    train_set = train_set or make_dataset(
        base_cfg.scene, base_cfg.transform, base_cfg.train_pairs, base_cfg.train_seed
    )
    eval_set = eval_set or make_dataset(
        base_cfg.scene, base_cfg.transform, base_cfg.eval_pairs, base_cfg.eval_seed
    )
    eval_hash = content_hash([v for pair in eval_set for v in (pair.fixed, pair.moving)])

    table: "OrderedDict[str, MetricsRow]" = OrderedDict()
    details = {}
    for name, weights in arm_weights(base_cfg.weights).items():
        cfg = copy.deepcopy(base_cfg)
        cfg.weights = replace(weights)
        logger.info(f"Ablation arm '{name}': {weights}")
        result = train(cfg, output_dir / name, train_set=train_set)
        row = evaluate(result.model, eval_set, task=cfg.task, kl_mode=cfg.kl_mode)
        table[name] = row
        details[name] = {
            "weights": vars(weights).copy(),
            "metrics": row.to_csv_row(name),
            "feature_kl_alt": row.feature_kl_alt,
            "feature_kl_alt_sd": row.feature_kl_alt_sd,
            "matrix_error": row.matrix_error,
            "skipped_steps": result.skipped_steps,
            "eval_hash": eval_hash,
        }

    csv_path = write_metrics_csv(table, output_dir / METRICS_CSV)
    trends = check_trends(table)
    json_path = write_metrics_json(
        {
            "kl_mode": base_cfg.kl_mode,
            "eval_hash": eval_hash,
            "arms": details,
            "trends": {t.name: t.passed for t in trends},
        },
        output_dir / METRICS_JSON
    )
    return AblationResult(
        table=table,
        eval_hash=eval_hash,
        metrics_csv=csv_path,
        metrics_json=json_path,
        trends=trends
    )

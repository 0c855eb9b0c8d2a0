"""学習ループ。"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from ..align.fitting import CoplanarConfigurationError, DegenerateConfigurationError
from ..autodiff import GradientError, backward
from ..io.checkpoint import save_checkpoint
from ..io.reports import LossLog
from ..keypoints.losses import NonFiniteLossError
from ..models.keypoint import LossReport
from ..network.model import FeatureExtractor, init_parameters
from ..synth.generator import SyntheticPair, make_dataset
from ..utils.logger import ProgressLogger
from .evaluate import evaluate
from .optimizer import Adam
from .pipeline import ObjectiveSettings, mean_report, pair_objective

if TYPE_CHECKING:
    from ..config import Config

logger = logging.getLogger(__name__)

LOSSES_NAME = "losses.jsonl"
CONFIG_NAME = "config.json"


class TrainingDivergedError(Exception):
    """損失が非有限になった。損失が最後に有限だったパラメータを保存済み。"""

    def __init__(self, message: str, step: int, checkpoint_path: Optional[Path] = None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


class DegenerateTrainingError(Exception):
    """退化フィットでスキップしたステップの割合が上限を超えた。"""
    pass


@dataclass
class TrainResult:
    """学習の成果物。"""
    model: FeatureExtractor
    output_dir: Path
    checkpoint_path: Path
    loss_log_path: Path
    reports: List[LossReport] = field(default_factory=list)
    steps_run: int = 0
    skipped_steps: int = 0


def batch_gradients(
    model: FeatureExtractor,
    batch: Sequence[SyntheticPair],
    settings: ObjectiveSettings
) -> Tuple[List[np.ndarray], LossReport]:
    """バッチ平均の勾配と LossReport を求める。

    各ペアを順に処理し、勾配は固定順で加算する。
    """
    grads = [np.zeros_like(p) for p in model.parameters()]
    reports = []
    for pair in batch:
        nodes = model.parameter_nodes()
        objective = pair_objective(model, nodes, pair.fixed, pair.moving, settings)
        grad_map = backward(objective.total)
        for i, node in enumerate(nodes):
            grads[i] += grad_map[node]
        reports.append(objective.report)
    scale = 1.0 / len(batch)
    return [g * scale for g in grads], mean_report(reports)


def train(
    cfg: "Config",
    output_dir: Optional[Union[str, Path]] = None,
    train_set: Optional[List[SyntheticPair]] = None,
    eval_set: Optional[List[SyntheticPair]] = None
) -> TrainResult:
    """設定に従って特徴抽出器を学習する。

    Args:
        cfg: 設定
        output_dir: 出力先（省略時は cfg.output_dir）
        train_set: 学習ペア（省略時は cfg から生成）
        eval_set: 定期評価に使うペア（eval_every > 0 のとき）

    Returns:
        TrainResult

    Raises:
        TrainingDivergedError: 損失または勾配が非有限になった場合
        DegenerateTrainingError: スキップしたステップが max_skip_fraction を超えた場合
    """
    errors = cfg.validate()
    if errors:
        raise ValueError("Invalid configuration: " + "; ".join(errors))

    output_dir = Path(output_dir or cfg.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    cfg.save_json(str(output_dir / CONFIG_NAME))

    pairs = train_set or make_dataset(cfg.scene, cfg.transform, cfg.train_pairs, cfg.train_seed)
    model = init_parameters(cfg.model, grid_dims=tuple(cfg.scene.dims))
    checkpoint_path = save_checkpoint(model, output_dir, step=0)

    settings = ObjectiveSettings.from_config(cfg)
    optimizer = Adam([p.shape for p in model.parameters()], cfg.optimizer)
    loss_log = LossLog(output_dir / LOSSES_NAME)
    progress = ProgressLogger(cfg.steps, logger, log_interval=cfg.log_interval)
    reports: List[LossReport] = []
    skipped = 0
    last_finite = [p.copy() for p in model.parameters()]
    last_finite_step = 0

    logger.info(
        f"Training started: task={cfg.task}, steps={cfg.steps}, batch={cfg.batch_size}, "
        f"weights=(kl={cfg.weights.lambda_kl}, var={cfg.weights.lambda_var}, "
        f"rep={cfg.weights.lambda_rep}, tau={cfg.weights.tau})"
    )

    for step in range(cfg.steps):
        batch = [pairs[(step * cfg.batch_size + b) % len(pairs)] for b in range(cfg.batch_size)]
        try:
            grads, report = batch_gradients(model, batch, settings)
        except (DegenerateConfigurationError, CoplanarConfigurationError) as e:
            skipped += 1
            logger.warning(f"Step {step}: degenerate fit, step skipped ({e})")
            progress.update("skipped")
            continue
        except (NonFiniteLossError, GradientError) as e:
            # 損失が最後に有限だったときのパラメータへ戻して保存する
            model.set_parameters(last_finite)
            path = save_checkpoint(model, output_dir, step=last_finite_step)
            logger.error(f"Training diverged at step {step}: {e}")
            raise TrainingDivergedError(
                f"Non-finite loss at step {step}: {e}", step=step, checkpoint_path=path
            ) from e

        loss_log.append(step, report)
        reports.append(report)
        last_finite = [p.copy() for p in model.parameters()]
        last_finite_step = step
        optimizer.step(model.parameters(), grads)
        progress.update(str(report))

        if cfg.eval_every > 0 and eval_set and (step + 1) % cfg.eval_every == 0:
            row = evaluate(model, eval_set, task=cfg.task, kl_mode=cfg.kl_mode)
            logger.info(
                f"Step {step + 1} eval: rot_err={row.rotation_error_deg:.3f} deg, "
                f"specnorm={row.spectral_norm:.3f}, pointdist={row.mean_point_distance_vox:.3f}"
            )

    checkpoint_path = save_checkpoint(model, output_dir, step=cfg.steps)
    progress.complete("Training finished")

    if cfg.steps > 0:
        fraction = skipped / cfg.steps
        if fraction > cfg.max_skip_fraction:
            raise DegenerateTrainingError(
                f"{skipped}/{cfg.steps} steps skipped on degenerate fits "
                f"({fraction:.1%} > {cfg.max_skip_fraction:.1%})"
            )

    return TrainResult(
        model=model,
        output_dir=output_dir,
        checkpoint_path=checkpoint_path,
        loss_log_path=loss_log.path,
        reports=reports,
        steps_run=cfg.steps - skipped,
        skipped_steps=skipped
    )

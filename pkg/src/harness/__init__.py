"""学習・評価・アブレーション・勾配検証のハーネス。"""

from .optimizer import Adam, AdamConfig
from .pipeline import ObjectiveSettings, PairObjective, objective_from_logits, pair_objective
from .train import DegenerateTrainingError, TrainingDivergedError, TrainResult, train
from .evaluate import (
    MissingGroundTruthError,
    SeriesEvaluation,
    evaluate,
    evaluate_checkpoint,
    evaluate_series,
    model_predictor,
    oracle_predictor,
    pair_metrics,
)
from .ablate import ARMS, AblationResult, TrendCheck, ablate, check_trends
from .gradcheck_suite import OpCheck, gradcheck_all, objective_check, registered_checks

__all__ = [
    "Adam",
    "AdamConfig",
    "ObjectiveSettings",
    "PairObjective",
    "objective_from_logits",
    "pair_objective",
    "DegenerateTrainingError",
    "TrainingDivergedError",
    "TrainResult",
    "train",
    "MissingGroundTruthError",
    "SeriesEvaluation",
    "evaluate",
    "evaluate_checkpoint",
    "evaluate_series",
    "model_predictor",
    "oracle_predictor",
    "pair_metrics",
    "ARMS",
    "AblationResult",
    "TrendCheck",
    "ablate",
    "check_trends",
    "OpCheck",
    "gradcheck_all",
    "objective_check",
    "registered_checks",
]

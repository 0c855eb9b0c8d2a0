"""キーポイント位置合わせツールのメインエントリーポイント。"""

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional
import logging

from .config import Config
from .harness.ablate import ablate
from .harness.evaluate import evaluate_checkpoint, evaluate_series
from .harness.gradcheck_suite import gradcheck_all
from .harness.train import train
from .io.checkpoint import load_checkpoint
from .io.reports import write_metrics_csv, write_metrics_json
from .synth.dataset import load_dataset, load_series, read_manifest, write_dataset, write_series
from .synth.generator import SyntheticPair, generate_series, make_dataset
from .utils.logger import setup_logging

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = "config/default_config.yaml"
GRADCHECK_CSV = "gradcheck.csv"

# CLI フラグ → 設定への反映
OVERRIDES: Dict[str, Callable[[Config, object], None]] = {
    "task": lambda c, v: setattr(c, "task", v),
    "steps": lambda c, v: setattr(c, "steps", v),
    "batch_size": lambda c, v: setattr(c, "batch_size", v),
    "lambda_kl": lambda c, v: setattr(c.weights, "lambda_kl", v),
    "lambda_var": lambda c, v: setattr(c.weights, "lambda_var", v),
    "lambda_rep": lambda c, v: setattr(c.weights, "lambda_rep", v),
    "tau": lambda c, v: setattr(c.weights, "tau", v),
    "kl_mode": lambda c, v: setattr(c, "kl_mode", v),
    "var_norm": lambda c, v: setattr(c, "var_norm", v),
    "sim": lambda c, v: setattr(c, "similarity", v),
    "learning_rate": lambda c, v: setattr(c.optimizer, "learning_rate", v),
    "keypoints": lambda c, v: setattr(c.model, "keypoints", v),
    "seed": lambda c, v: setattr(c.model, "seed", v),
    "train_seed": lambda c, v: setattr(c, "train_seed", v),
    "eval_seed": lambda c, v: setattr(c, "eval_seed", v),
    "train_pairs": lambda c, v: setattr(c, "train_pairs", v),
    "eval_pairs": lambda c, v: setattr(c, "eval_pairs", v),
    "eval_every": lambda c, v: setattr(c, "eval_every", v),
    "output": lambda c, v: setattr(c, "output_dir", v),
}


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    """設定ファイルと上書きフラグを追加する。"""
    parser.add_argument("-c", "--config", help=f"設定ファイル（YAML/JSON、既定: {DEFAULT_CONFIG}）")
    parser.add_argument("-v", "--verbose", action="store_true", help="詳細ログを有効にする")
    parser.add_argument("-o", "--output", help="出力ディレクトリ")
    parser.add_argument("--task", choices=["rigid", "affine"], help="位置合わせ課題")
    parser.add_argument("--seed", type=int, help="モデル初期化のシード")
    parser.add_argument("--train-seed", type=int, help="学習データのシード")
    parser.add_argument("--eval-seed", type=int, help="評価データのシード")
    parser.add_argument("--eval-pairs", type=int, help="評価ペア数")
    parser.add_argument("--kl-mode", choices=["normalised", "density"], help="KL の規約")


def _add_training_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--steps", type=int, help="学習ステップ数")
    parser.add_argument("--batch-size", type=int, help="バッチサイズ")
    parser.add_argument("--lambda-kl", type=float, help="λ_KL")
    parser.add_argument("--lambda-var", type=float, help="λ_var")
    parser.add_argument("--lambda-rep", type=float, help="λ_rep")
    parser.add_argument("--tau", type=float, help="反発損失の温度 τ")
    parser.add_argument("--var-norm", choices=["rms", "frobenius"], help="分散ペナルティのノルム")
    parser.add_argument("--sim", choices=["mse", "ncc"], help="類似度")
    parser.add_argument("--learning-rate", type=float, help="Adam の学習率")
    parser.add_argument("--keypoints", type=int, help="キーポイント数 K")
    parser.add_argument("--train-pairs", type=int, help="学習ペア数")
    parser.add_argument("--eval-every", type=int, help="定期評価の間隔（0 で無効）")
    parser.add_argument("--data", help="synth で書き出した学習データのディレクトリ")


def build_parser() -> argparse.ArgumentParser:
    """サブコマンド付きの引数パーサーを作成する。"""
    parser = argparse.ArgumentParser(
        description="キーポイントに基づく3次元ボリューム位置合わせ（KL・分散・反発正則化付き）",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用例:
  # 合成データを書き出す
  python -m src.main synth --pairs 16 -o data/rigid

  # 学習
  python -m src.main train --steps 2000 -o runs/full

  # チェックポイントを評価
  python -m src.main eval --checkpoint runs/full -o runs/full/eval

  # 5アームのアブレーション
  python -m src.main ablate -o runs/ablation

  # 勾配検証
  python -m src.main gradcheck -o runs/gradcheck
        """
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    synth = subparsers.add_parser("synth", help="合成ペアまたは時系列を書き出す")
    _add_config_arguments(synth)
    synth.add_argument("--pairs", type=int, help="ペア数（既定: train_pairs）")
    synth.add_argument("--series", type=int, metavar="LENGTH", help="ペアの代わりに時系列を生成する")

    train_parser = subparsers.add_parser("train", help="特徴抽出器を学習する")
    _add_config_arguments(train_parser)
    _add_training_arguments(train_parser)

    eval_parser = subparsers.add_parser("eval", help="チェックポイントを評価する")
    _add_config_arguments(eval_parser)
    eval_parser.add_argument("--checkpoint", required=True, help="checkpoint.bin を含むディレクトリ")
    eval_parser.add_argument("--data", help="評価データのディレクトリ（省略時は eval_seed から生成）")

    ablate_parser = subparsers.add_parser("ablate", help="5アームのアブレーションを実行する")
    _add_config_arguments(ablate_parser)
    _add_training_arguments(ablate_parser)
    ablate_parser.add_argument(
        "--strict", action="store_true", help="傾向チェックが1つでも失敗したら終了コード2を返す"
    )

    gradcheck = subparsers.add_parser("gradcheck", help="全演算と目的関数の勾配を検証する")
    gradcheck.add_argument("-v", "--verbose", action="store_true", help="詳細ログを有効にする")
    gradcheck.add_argument("-o", "--output", default=".", help="gradcheck.csv の出力ディレクトリ")
    gradcheck.add_argument("--tol", type=float, default=1e-4, help="相対誤差の許容値")
    gradcheck.add_argument("--seed", type=int, default=0, help="検証インスタンスのシード")

    return parser


def load_config(args: argparse.Namespace) -> Config:
    """設定ファイルを読み込み、CLI フラグで上書きする。

    Raises:
        FileNotFoundError: 明示的に指定した設定ファイルが存在しない場合
    """
    if args.config:
        if not Path(args.config).exists():
            raise FileNotFoundError(f"Configuration file not found: {args.config}")
        config = Config.from_yaml(args.config)
    elif Path(DEFAULT_CONFIG).exists():
        config = Config.from_yaml(DEFAULT_CONFIG)
    else:
        config = Config()

    task_given = getattr(args, "task", None) is not None
    for dest, apply in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            apply(config, value)
    if task_given:
        config.transform.kind = config.task
    if args.verbose:
        config.log_level = "DEBUG"
    return config


def _validate(config: Config) -> bool:
    errors = config.validate()
    for error in errors:
        logger.error(f"Configuration error: {error}")
    return not errors


def _load_pairs(directory: Optional[str], config: Config, n_pairs: int, seed: int) -> List[SyntheticPair]:
    if directory:
        pairs = load_dataset(directory)
        logger.info(f"Loaded {len(pairs)} pairs from {directory}")
        return pairs
    return make_dataset(config.scene, config.transform, n_pairs, seed)


def run_synth(args: argparse.Namespace, config: Config) -> int:
    output_dir = Path(config.output_dir)
    if args.series:
        frames = generate_series(config.scene, config.transform, args.series)
        manifest = write_series(frames, output_dir, config.scene, config.transform)
        print(f"時系列を書き出しました: {output_dir} ({len(manifest.frames)} フレーム)")
    else:
        n_pairs = args.pairs or config.train_pairs
        pairs = make_dataset(config.scene, config.transform, n_pairs, config.train_seed)
        manifest = write_dataset(pairs, output_dir, config.scene, config.transform)
        print(f"合成ペアを書き出しました: {output_dir} ({len(manifest.pairs)} ペア)")
    print(f"  content hash: {manifest.content_hash}")
    return 0


def run_train(args: argparse.Namespace, config: Config) -> int:
    train_set = _load_pairs(args.data, config, config.train_pairs, config.train_seed)
    eval_set = None
    if config.eval_every > 0:
        eval_set = make_dataset(config.scene, config.transform, config.eval_pairs, config.eval_seed)
    result = train(config, config.output_dir, train_set=train_set, eval_set=eval_set)
    logger.info(
        f"Training complete: {result.steps_run} steps run, {result.skipped_steps} skipped, "
        f"checkpoint at {result.checkpoint_path}"
    )
    return 0


def run_eval(args: argparse.Namespace, config: Config) -> int:
    output_dir = Path(config.output_dir)
    if args.data and read_manifest(args.data).kind == "series":
        model, _ = load_checkpoint(args.checkpoint)
        series = evaluate_series(model, load_series(args.data), config.task, config.kl_mode)
        row = series.summary
    else:
        pairs = _load_pairs(args.data, config, config.eval_pairs, config.eval_seed)
        row = evaluate_checkpoint(args.checkpoint, pairs, config.task, config.kl_mode)

    write_metrics_csv({"eval": row}, output_dir / "metrics.csv")
    write_metrics_json(
        {"checkpoint": str(args.checkpoint), "kl_mode": config.kl_mode, "metrics": row.to_csv_row("eval"),
         "feature_kl_alt": row.feature_kl_alt, "matrix_error": row.matrix_error},
        output_dir / "metrics.json"
    )
    print(
        f"rot_err={row.rotation_error_deg:.4f}±{row.rotation_error_sd:.4f} deg, "
        f"trans_err={row.translation_error_vox:.4f} vox, kl={row.feature_kl:.4f}, "
        f"specnorm={row.spectral_norm:.4f}, pointdist={row.mean_point_distance_vox:.4f}"
    )
    return 0


def run_ablate(args: argparse.Namespace, config: Config) -> int:
    train_set = _load_pairs(args.data, config, config.train_pairs, config.train_seed)
    result = ablate(config, config.output_dir, train_set=train_set)
    print(f"metrics.csv: {result.metrics_csv}")
    for trend in result.trends:
        print(f"  {trend.name}: {'PASS' if trend.passed else 'FAIL'} ({trend.detail})")
    if args.strict and not all(t.passed for t in result.trends):
        return 2
    return 0


def run_gradcheck(args: argparse.Namespace) -> int:
    output_path = Path(args.output) / GRADCHECK_CSV
    reports = gradcheck_all(output_path, tol=args.tol, seed=args.seed, progress=True)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed, report: {output_path}")
    return 1 if failed else 0


COMMANDS = {
    "synth": run_synth,
    "train": run_train,
    "eval": run_eval,
    "ablate": run_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """メインエントリーポイント。

    Returns:
        終了コード（0: 成功、1: エラー、2: 傾向チェック失敗（--strict））
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "gradcheck":
        setup_logging(level="DEBUG" if args.verbose else "INFO")
        try:
            return run_gradcheck(args)
        except Exception as e:
            logger.exception(f"Fatal error: {e}")
            return 1

    try:
        config = load_config(args)
    except (FileNotFoundError, ValueError) as e:
        setup_logging()
        logger.error(str(e))
        return 1

    setup_logging(level=config.log_level, log_file=config.log_file)
    if not _validate(config):
        return 1

    try:
        return COMMANDS[args.command](args, config)
    except Exception as e:
        logger.exception(f"Fatal error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

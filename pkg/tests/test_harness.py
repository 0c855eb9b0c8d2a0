"""学習・評価・アブレーション・勾配検証ハーネスのテスト。"""

import json
import sys
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pandas as pd
import pytest

from src.align.fitting import DegenerateConfigurationError
from src.autodiff import leaf
from src.config import Config
from src.harness import (
    ARMS,
    Adam,
    AdamConfig,
    DegenerateTrainingError,
    MissingGroundTruthError,
    ObjectiveSettings,
    TrainingDivergedError,
    ablate,
    check_trends,
    evaluate,
    evaluate_checkpoint,
    evaluate_series,
    gradcheck_all,
    objective_check,
    objective_from_logits,
    oracle_predictor,
    pair_metrics,
    registered_checks,
    train,
)
from src.harness.ablate import arm_weights
from src.harness.evaluate import estimate_transform
from src.harness.train import CONFIG_NAME, LOSSES_NAME, batch_gradients
from src.io.checkpoint import load_checkpoint
from src.io.reports import read_loss_log, read_metrics_csv
from src.keypoints import extract_keypoints
from src.keypoints.losses import NonFiniteLossError
from src.models.field import FeatureStack, Grid, PointCloud, Volume
from src.models.keypoint import LossWeights
from src.models.metrics import MetricsRow, PairMetrics
from src.models.transform import AffineTransform
from src.network import init_parameters
from src.network.model import SiameseKeypoints
from src.synth import SceneSpec, SyntheticPair, TransformSpec, generate_pair, generate_series, make_dataset
from src.warp import interior_mask, resample


def _tiny_config(**overrides) -> Config:
    """12³・小モデル・数ステップの設定。"""
    data = {
        "scene": {"dims": [12, 12, 12], "n_blobs": 3, "margin": 2.0, "eigen_min": 0.3, "eigen_max": 0.6},
        "transform": {"max_rotation_deg": 10.0, "max_translation_vox": 1.0},
        "model": {"hidden_channels": 2, "depth": 1, "keypoints": 4},
        "steps": 2,
        "batch_size": 1,
        "train_pairs": 2,
        "eval_pairs": 2,
        "max_skip_fraction": 0.5,
        "log_interval": 1,
    }
    data.update(overrides)
    return Config.from_dict(data)


def _oracle_pairs(n: int = 3):
    scene = SceneSpec(dims=(16, 16, 16), n_blobs=4, margin=3.0, eigen_min=0.3, eigen_max=1.0)
    return make_dataset(scene, TransformSpec(max_rotation_deg=10.0, max_translation_vox=2.0), n, seed=1)


def _row(rot: float, kl: float, spec: float, dist: float) -> MetricsRow:
    return MetricsRow.aggregate([PairMetrics(rot, 1.0, kl, kl, spec, dist)])


class TestAdam:
    """Adam のテスト。"""

    def test_first_step_moves_by_learning_rate(self):
        """初回更新はバイアス補正により約 lr·sign(g) だけ動く。"""
        params = [np.zeros(3), np.ones((2, 2))]
        grads = [np.array([2.0, -0.5, 1e-3]), np.full((2, 2), -4.0)]
        optimizer = Adam([p.shape for p in params], AdamConfig(learning_rate=0.01))
        optimizer.step(params, grads)
        np.testing.assert_allclose(params[0], [-0.01, 0.01, -0.01], rtol=1e-4)
        np.testing.assert_allclose(params[1], 1.01, rtol=1e-6)

    def test_length_mismatch(self):
        """パラメータ数と勾配数の不一致はエラー。"""
        optimizer = Adam([(3,)], AdamConfig())
        with pytest.raises(ValueError):
            optimizer.step([np.zeros(3)], [])

    def test_validate(self):
        """学習率0や beta=1 は不正。"""
        assert AdamConfig().validate() == []
        assert len(AdamConfig(learning_rate=0.0, beta2=1.0).validate()) == 2


class TestObjective:
    """1ペア分の目的関数のテスト。"""

    def _logits_and_volumes(self, seed: int = 0):
        grid = Grid((6, 6, 6))
        coords = grid.coordinates()
        fixed = Volume.from_flat(grid, np.exp(-np.sum((coords - 2.5) ** 2, axis=1) / 8.0))
        moving = Volume.from_flat(grid, np.exp(-np.sum((coords - 2.9) ** 2, axis=1) / 6.0))
        rng = np.random.default_rng(seed)
        return leaf(3.0 * rng.normal(size=(4, grid.size))), leaf(3.0 * rng.normal(size=(4, grid.size))), fixed, moving

    def test_zero_weights_reduce_to_similarity(self):
        """λ がすべて0なら総和は類似度項そのもの。"""
        lf, lm, fixed, moving = self._logits_and_volumes()
        settings = ObjectiveSettings(weights=LossWeights(0.0, 0.0, 0.0, 0.1))
        objective = objective_from_logits(lf, lm, fixed, moving, settings)
        assert objective.report.total == pytest.approx(objective.report.l_sim, abs=1e-15)
        assert float(objective.total.value) == pytest.approx(objective.report.l_sim, abs=1e-15)
        assert objective.report.l_rep > 0.0

    def test_default_weights_combination(self):
        """既定の重みでは総和は各項の重み付き和。"""
        lf, lm, fixed, moving = self._logits_and_volumes(seed=1)
        w = LossWeights()
        report = objective_from_logits(lf, lm, fixed, moving, ObjectiveSettings(weights=w)).report
        expected = report.l_sim + w.lambda_kl * report.l_kl + w.lambda_var * report.l_var + w.lambda_rep * report.l_rep
        assert report.total == pytest.approx(expected, rel=1e-12)

    def test_transform_is_rigid_matrix(self):
        """剛体課題の推定行列は 4x4 で線形部分が直交。"""
        lf, lm, fixed, moving = self._logits_and_volumes(seed=2)
        objective = objective_from_logits(lf, lm, fixed, moving, ObjectiveSettings(weights=LossWeights()))
        matrix = np.asarray(objective.transform.value)
        assert matrix.shape == (4, 4)
        np.testing.assert_allclose(matrix[:3, :3] @ matrix[:3, :3].T, np.eye(3), atol=1e-9)


class TestEvaluate:
    """評価指標のテスト。"""

    def test_oracle_rotation_error(self):
        """真のブロブ中心を使う予測器の回転誤差は 1e-6° 未満。"""
        row = evaluate(oracle_predictor(), _oracle_pairs())
        assert row.rotation_error_deg < 1e-6
        assert row.translation_error_vox < 1e-6
        assert row.spectral_norm == pytest.approx(1.0)
        assert row.mean_point_distance_vox > 0.0
        assert row.n_pairs == 3

    def test_oracle_realignment_mse(self):
        """ノイズなしペアでは推定変換で戻すと内部の MSE < 1e-6。"""
        scene = SceneSpec(noise_sigma=0.0, seed=1)
        pair = generate_pair(scene, TransformSpec(max_rotation_deg=0.0, integer_translation=True, seed=0))
        est = estimate_transform(oracle_predictor()(pair), "rigid")
        moved = resample(pair.moving, est)
        mask = interior_mask(pair.fixed, 4)
        assert np.mean((pair.fixed.flat() - moved.flat())[mask] ** 2) < 1e-6

    def test_uniform_features(self):
        """一様特徴のスペクトルノルムは (24²−1)/12、点間距離は0。"""
        grid = Grid((24, 24, 24))
        features = FeatureStack(grid=grid, data=np.full((3, grid.size), 1.0 / grid.size))
        keypoints = extract_keypoints(features)
        cloud = PointCloud(np.stack([kp.mu for kp in keypoints]))
        prediction = SiameseKeypoints(
            fixed_cloud=cloud,
            moving_cloud=cloud,
            fixed_keypoints=keypoints,
            fixed_features=features
        )
        metrics = pair_metrics(prediction, AffineTransform.identity())
        assert metrics.spectral_norm == pytest.approx((24 ** 2 - 1) / 12.0, rel=1e-9)
        assert metrics.spectral_norm == pytest.approx(47.92, abs=0.01)
        assert metrics.mean_point_distance_vox == pytest.approx(0.0, abs=1e-9)
        assert metrics.rotation_error_deg == 0.0

    def test_missing_ground_truth(self):
        """真値がない評価ペアはエラー。"""
        pair = _oracle_pairs(1)[0]
        prediction = oracle_predictor()(pair)
        with pytest.raises(MissingGroundTruthError):
            pair_metrics(prediction, None)

    def test_oracle_needs_centres(self):
        """ブロブ中心を持たないペアでは oracle は使えない。"""
        pair = _oracle_pairs(1)[0]
        bare = SyntheticPair(fixed=pair.fixed, moving=pair.moving, gt=pair.gt)
        with pytest.raises(MissingGroundTruthError):
            oracle_predictor()(bare)

    def test_affine_task_reports_matrix_error(self):
        """アフィン課題では行列誤差も集計する。"""
        scene = SceneSpec(dims=(16, 16, 16), n_blobs=5, margin=3.0, eigen_min=0.3, eigen_max=1.0)
        tspec = TransformSpec(kind="affine", max_rotation_deg=10.0, max_translation_vox=1.0,
                              log_scale_range=0.1, shear_range=0.05)
        pairs = make_dataset(scene, tspec, 2, seed=4)
        row = evaluate(oracle_predictor(), pairs, task="affine")
        assert row.matrix_error is not None
        assert row.matrix_error < 1e-6
        assert row.rotation_error_deg < 1e-4

    def test_series_oracle(self):
        """時系列の各フレームをフレーム0へ揃える。"""
        frames = generate_series(
            SceneSpec(eigen_max=3.0, seed=3), TransformSpec(max_rotation_deg=10.0, max_translation_vox=2.0, seed=4), 3
        )
        result = evaluate_series(oracle_predictor(), frames)
        assert len(result.per_frame) == 2
        assert all(m.rotation_error_deg < 1e-6 for m in result.per_frame)
        assert result.summary.n_pairs == 2

    def test_series_too_short(self):
        """1フレームの時系列は評価できない。"""
        frames = generate_series(SceneSpec(seed=3), TransformSpec(seed=4), 2)[:1]
        with pytest.raises(ValueError):
            evaluate_series(oracle_predictor(), frames)


class TestTrain:
    """train のテスト。"""

    def test_training_reduces_rotation_error(self):
        """短い学習でも評価ペアの回転誤差は初期モデルより下がる。"""
        cfg = _tiny_config(
            steps=60,
            batch_size=2,
            scene={"dims": [16, 16, 16], "n_blobs": 4, "margin": 2.0, "eigen_min": 0.5, "eigen_max": 1.5},
            transform={"max_rotation_deg": 20.0, "max_translation_vox": 1.0},
            model={"hidden_channels": 4, "depth": 1, "keypoints": 4},
            optimizer={"learning_rate": 0.01},
        )
        pairs = make_dataset(cfg.scene, cfg.transform, 2, cfg.train_seed)
        initial = init_parameters(cfg.model, grid_dims=tuple(cfg.scene.dims))
        before = evaluate(initial, pairs)
        with TemporaryDirectory() as tmpdir:
            result = train(cfg, tmpdir, train_set=pairs)
        after = evaluate(result.model, pairs)
        assert result.skipped_steps == 0
        assert after.rotation_error_deg < before.rotation_error_deg

    def test_writes_artifacts(self):
        """config.json・losses.jsonl・最終チェックポイントを書き出す。"""
        cfg = _tiny_config(steps=3)
        with TemporaryDirectory() as tmpdir:
            result = train(cfg, tmpdir)
            assert (Path(tmpdir) / CONFIG_NAME).exists()
            records = read_loss_log(Path(tmpdir) / LOSSES_NAME)
            assert len(records) == result.steps_run
            assert [r.step for r in records] == list(range(len(records)))
            assert result.steps_run + result.skipped_steps == 3
            _, step = load_checkpoint(tmpdir)
            assert step == 3
            saved = json.loads((Path(tmpdir) / CONFIG_NAME).read_text())
            assert saved["steps"] == 3

    def test_zero_steps_checkpoint_equals_init(self):
        """steps=0 のチェックポイントは初期値と一致する。"""
        cfg = _tiny_config(steps=0)
        with TemporaryDirectory() as tmpdir:
            train(cfg, tmpdir)
            model, step = load_checkpoint(tmpdir)
            assert step == 0
            initial = init_parameters(cfg.model, grid_dims=tuple(cfg.scene.dims))
            for saved, expected in zip(model.parameters(), initial.parameters()):
                np.testing.assert_array_equal(saved, expected)
            assert read_loss_log(Path(tmpdir) / LOSSES_NAME) == []

    def test_zero_weights_log_similarity_only(self):
        """λ=0 の学習ではステップごとの total が sim と等しい。"""
        cfg = _tiny_config(weights={"lambda_kl": 0.0, "lambda_var": 0.0, "lambda_rep": 0.0})
        with TemporaryDirectory() as tmpdir:
            result = train(cfg, tmpdir)
            for record in read_loss_log(result.loss_log_path):
                assert record.total == pytest.approx(record.sim, abs=1e-15)

    def test_deterministic(self):
        """同じ設定の2回の学習は同じ損失ログを出す。"""
        cfg = _tiny_config()
        with TemporaryDirectory() as a, TemporaryDirectory() as b:
            train(cfg, a)
            train(cfg, b)
            assert (Path(a) / LOSSES_NAME).read_bytes() == (Path(b) / LOSSES_NAME).read_bytes()

    def test_invalid_config(self):
        """不正な設定は学習前に拒否する。"""
        cfg = _tiny_config(eval_seed=1)
        with TemporaryDirectory() as tmpdir:
            with pytest.raises(ValueError):
                train(cfg, tmpdir)

    def test_divergence_keeps_last_checkpoint(self, monkeypatch):
        """非有限の損失は直前のチェックポイントを残して中断する。"""
        def diverge(model, batch, settings):
            raise NonFiniteLossError("Loss term 'var' is not finite: nan")

        monkeypatch.setattr(sys.modules["src.harness.train"], "batch_gradients", diverge)
        with TemporaryDirectory() as tmpdir:
            with pytest.raises(TrainingDivergedError) as excinfo:
                train(_tiny_config(), tmpdir)
            assert excinfo.value.step == 0
            assert excinfo.value.checkpoint_path.exists()

    def test_divergence_saves_last_finite_parameters(self, monkeypatch):
        """発散時のチェックポイントは損失が最後に有限だったパラメータ。"""
        original = batch_gradients
        finite, diverged = [], []

        def flaky(model, batch, settings):
            if len(finite) == 2:
                diverged.extend(p.copy() for p in model.parameters())
                raise NonFiniteLossError("Loss term 'kl' is not finite: inf")
            result = original(model, batch, settings)
            finite.append([p.copy() for p in model.parameters()])
            return result

        monkeypatch.setattr(sys.modules["src.harness.train"], "batch_gradients", flaky)
        with TemporaryDirectory() as tmpdir:
            with pytest.raises(TrainingDivergedError) as excinfo:
                train(_tiny_config(steps=5), tmpdir)
            model, step = load_checkpoint(tmpdir)
        assert excinfo.value.step == 2
        assert step == 1
        for saved, expected in zip(model.parameters(), finite[-1]):
            np.testing.assert_array_equal(saved, expected)
        assert any(not np.array_equal(a, b) for a, b in zip(model.parameters(), diverged))

    def test_degenerate_steps_fail_run(self, monkeypatch):
        """退化フィットでのスキップが上限を超えると失敗する。"""
        def degenerate(model, batch, settings):
            raise DegenerateConfigurationError("collinear keypoints")

        monkeypatch.setattr(sys.modules["src.harness.train"], "batch_gradients", degenerate)
        with TemporaryDirectory() as tmpdir:
            with pytest.raises(DegenerateTrainingError):
                train(_tiny_config(), tmpdir)

    def test_evaluate_checkpoint_pure(self):
        """チェックポイントの評価はモデル直接の評価と一致し、繰り返しても同じ。"""
        cfg = _tiny_config(steps=1)
        eval_set = make_dataset(cfg.scene, cfg.transform, 2, cfg.eval_seed)
        with TemporaryDirectory() as tmpdir:
            result = train(cfg, tmpdir)
            first = evaluate_checkpoint(tmpdir, eval_set)
            second = evaluate_checkpoint(tmpdir, eval_set)
            direct = evaluate(result.model, eval_set)
            assert first.to_csv_row("a") == second.to_csv_row("a")
            for key, value in direct.to_csv_row("a").items():
                if key != "arm":
                    assert first.to_csv_row("a")[key] == pytest.approx(value, rel=1e-9, abs=1e-12)


class TestAblate:
    """アブレーションのテスト。"""

    def test_arm_weight_patterns(self):
        """5アームの重みパターン。"""
        base = LossWeights(lambda_kl=1.0, lambda_var=0.01, lambda_rep=0.001, tau=0.1)
        arms = arm_weights(base)
        assert list(arms) == ["baseline", "kl", "var", "kl_var", "full"]
        patterns = {
            name: (w.lambda_kl, w.lambda_var, w.lambda_rep) for name, w in arms.items()
        }
        assert patterns == {
            "baseline": (0.0, 0.0, 0.0),
            "kl": (1.0, 0.0, 0.0),
            "var": (0.0, 0.01, 0.0),
            "kl_var": (1.0, 0.01, 0.0),
            "full": (1.0, 0.01, 0.001),
        }
        assert all(w.tau == 0.1 for w in arms.values())

    def test_check_trends_pass(self):
        """期待どおりの表ではすべての傾向チェックが通る。"""
        table = {
            "baseline": _row(5.0, 20.0, 40.0, 2.0),
            "kl": _row(4.0, 3.0, 40.0, 2.0),
            "var": _row(4.0, 20.0, 5.0, 2.0),
            "kl_var": _row(3.0, 3.0, 5.0, 2.0),
            "full": _row(2.0, 4.0, 5.0, 4.0),
        }
        checks = check_trends(table)
        assert [c.name for c in checks] == ["rotation_error", "spectral_norm", "point_distance", "feature_kl"]
        assert all(c.passed for c in checks)

    def test_check_trends_fail(self):
        """反発項で点間距離が広がらなければ失敗を報告する。"""
        table = {
            "baseline": _row(5.0, 20.0, 40.0, 2.0),
            "kl": _row(4.0, 3.0, 40.0, 2.0),
            "var": _row(4.0, 20.0, 30.0, 2.0),
            "kl_var": _row(3.0, 3.0, 30.0, 2.0),
            "full": _row(6.0, 4.0, 30.0, 1.0),
        }
        failed = {c.name for c in check_trends(table) if not c.passed}
        assert failed == {"rotation_error", "spectral_norm", "point_distance"}

    def test_tiny_ablation_deterministic(self):
        """同じ設定の2回のアブレーションは metrics.csv がバイト一致する。"""
        cfg = _tiny_config(steps=1)
        with TemporaryDirectory() as a, TemporaryDirectory() as b:
            first = ablate(cfg, a)
            second = ablate(cfg, b)
            assert first.metrics_csv.read_bytes() == second.metrics_csv.read_bytes()
            assert first.eval_hash == second.eval_hash

            frame = read_metrics_csv(first.metrics_csv)
            assert list(frame.index) == list(ARMS)
            document = json.loads(first.metrics_json.read_text())
            assert {arm["eval_hash"] for arm in document["arms"].values()} == {first.eval_hash}
            for name in ARMS:
                assert (Path(a) / name / "checkpoint.bin").exists()

    @pytest.mark.slow
    def test_full_ablation_trends(self):
        """既定設定の5アームは全傾向チェックを満たす。"""
        with TemporaryDirectory() as tmpdir:
            result = ablate(Config(), tmpdir)
            failed = [f"{t.name}: {t.detail}" for t in result.trends if not t.passed]
            assert not failed


class TestGradcheckAll:
    """gradcheck_all のテスト。"""

    def test_all_pass_and_csv(self):
        """全演算と合成目的関数が通り、行数は登録数 + 1。"""
        with TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "gradcheck.csv"
            reports = gradcheck_all(path, seed=0)
            failed = [str(r) for r in reports if not r.passed]
            assert not failed
            frame = pd.read_csv(path)
            assert list(frame.columns) == ["op", "max_rel_err", "pass"]
            assert len(frame) == len(registered_checks()) + 1
            assert frame["op"].iloc[-1] == "objective"

    def test_objective_check_settings(self):
        """合成目的関数は中心差分 h=1e-4、相対誤差 1e-3 で検証する。"""
        check = objective_check()
        assert check.step == 1e-4
        assert check.tol == 1e-3
        assert all(c.tol is None for c in registered_checks())

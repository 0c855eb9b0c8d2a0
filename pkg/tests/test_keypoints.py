"""確率的キーポイントと正則化損失のテスト。"""

import math

import numpy as np
import pytest
from scipy.special import expit, logsumexp
from scipy.stats import multivariate_normal

from src.keypoints import (
    NonFiniteLossError,
    NormalizationError,
    center_of_mass,
    covariance,
    discretized_gaussian,
    extract_keypoints,
    loss_kl,
    loss_rep,
    loss_var,
    normalize_features,
    total_loss,
)
from src.models.field import FeatureStack, Grid, PointCloud
from src.models.keypoint import COVARIANCE_RIDGE, Keypoint, LossWeights


def _delta(grid: Grid, voxel) -> np.ndarray:
    data = np.zeros(grid.dims)
    data[tuple(voxel)] = 1.0
    return data.ravel(order="F")


def _uniform(grid: Grid) -> np.ndarray:
    return np.full(grid.size, 1.0 / grid.size)


def _random_stack(grid: Grid, channels: int, seed: int) -> FeatureStack:
    logits = np.random.default_rng(seed).normal(size=(channels, grid.size))
    return normalize_features(FeatureStack(grid=grid, data=logits))


def _brute_force_kl(features: FeatureStack, kps, mode: str) -> float:
    """ボクセルとチャネルの二重ループで L_KL を直接評価する。"""
    coords = features.grid.coordinates()
    k, n = features.data.shape
    total = 0.0
    for c in range(k):
        dist = multivariate_normal(mean=kps[c].mu, cov=kps[c].sigma + COVARIANCE_RIDGE * np.eye(3))
        log_q = np.array([dist.logpdf(x) for x in coords])
        if mode == "normalised":
            log_q = log_q - logsumexp(log_q)
        for i in range(n):
            f = features.data[c, i]
            if f >= 1e-30:
                total += f * (math.log(f) - log_q[i])
    return total / (k * n)


class TestNormalizeFeatures:
    """空間ソフトマックスのテスト。"""

    def test_zero_logits_uniform(self):
        """ゼロのロジットは全ボクセル 1/8。"""
        grid = Grid((2, 2, 2))
        result = normalize_features(FeatureStack(grid=grid, data=np.zeros((2, 8))))
        np.testing.assert_allclose(result.data, np.full((2, 8), 0.125))

    def test_saturation(self):
        """+1000 のロジットはそのボクセルにほぼ全質量が乗る。"""
        logits = np.zeros((1, 27))
        logits[0, 13] = 1000.0
        result = normalize_features(FeatureStack(grid=Grid((3, 3, 3)), data=logits))
        assert np.all(np.isfinite(result.data))
        assert result.data[0, 13] == pytest.approx(1.0)
        assert result.data[0, :13].max() < 1e-300

    def test_channel_sums(self):
        """シード付きランダムロジットのチャネル和は1。"""
        result = _random_stack(Grid((4, 5, 6)), 5, seed=11)
        np.testing.assert_allclose(result.channel_sums(), 1.0, atol=1e-12)
        assert np.all(result.data >= 0.0)


class TestMoments:
    """重心と共分散のテスト。"""

    def test_delta_center(self):
        """ボクセル (2,3,4) のデルタの重心。"""
        grid = Grid((5, 5, 5))
        np.testing.assert_allclose(center_of_mass(_delta(grid, (2, 3, 4)), grid), [2.0, 3.0, 4.0])

    def test_uniform_center(self):
        """3³ 一様分布の重心は (1,1,1)。"""
        grid = Grid((3, 3, 3))
        np.testing.assert_allclose(center_of_mass(_uniform(grid), grid), [1.0, 1.0, 1.0], atol=1e-12)

    def test_two_spikes_midpoint(self):
        """等しい2つのスパイクの重心は中点。"""
        grid = Grid((3, 1, 1))
        np.testing.assert_allclose(center_of_mass(np.array([0.5, 0.0, 0.5]), grid), [1.0, 0.0, 0.0])

    def test_unnormalised_rejected(self):
        """正規化されていないチャネルは拒否する。"""
        with pytest.raises(NormalizationError):
            center_of_mass(np.full(8, 0.2), Grid((2, 2, 2)))

    def test_delta_covariance_zero(self):
        """デルタの共分散はゼロ行列。"""
        grid = Grid((5, 5, 5))
        channel = _delta(grid, (1, 2, 3))
        np.testing.assert_allclose(covariance(channel, grid, center_of_mass(channel, grid)), np.zeros((3, 3)))

    def test_uniform_covariance(self):
        """3³ 一様分布の共分散は (2/3)I。"""
        grid = Grid((3, 3, 3))
        channel = _uniform(grid)
        sigma = covariance(channel, grid, center_of_mass(channel, grid))
        np.testing.assert_allclose(sigma, (2.0 / 3.0) * np.eye(3), atol=1e-12)

    def test_line_covariance(self):
        """(3,1,1) 一様分布の共分散は diag(2/3,0,0)。"""
        grid = Grid((3, 1, 1))
        channel = _uniform(grid)
        sigma = covariance(channel, grid, center_of_mass(channel, grid))
        np.testing.assert_allclose(sigma, np.diag([2.0 / 3.0, 0.0, 0.0]), atol=1e-12)

    def test_covariance_symmetric_psd(self):
        """ランダム特徴の共分散は対称半正定値。"""
        for kp in extract_keypoints(_random_stack(Grid((4, 4, 4)), 6, seed=2)):
            assert kp.is_symmetric()
            assert np.linalg.eigvalsh(kp.sigma)[0] >= -1e-12

    def test_translation_equivariance(self):
        """特徴を整数シフトすると μ も同じだけ動き Σ は不変。"""
        grid = Grid((12, 12, 12))
        blob = np.zeros(grid.dims)
        blob[2:5, 3:5, 2:6] = np.random.default_rng(0).uniform(0.1, 1.0, size=(3, 2, 4))
        blob /= blob.sum()
        shifted = np.roll(blob, shift=(4, 3, 5), axis=(0, 1, 2))
        kps = extract_keypoints(FeatureStack(grid=grid, data=np.stack([blob, shifted])))
        np.testing.assert_allclose(kps[1].mu - kps[0].mu, [4.0, 3.0, 5.0], atol=1e-12)
        np.testing.assert_allclose(kps[1].sigma, kps[0].sigma, atol=1e-12)

    def test_extract_matches_per_channel(self):
        """extract_keypoints は各チャネルの重心・共分散と一致する。"""
        stack = _random_stack(Grid((3, 4, 5)), 3, seed=5)
        kps = extract_keypoints(stack)
        for k, kp in enumerate(kps):
            mu = center_of_mass(stack.channel(k), stack.grid)
            np.testing.assert_allclose(kp.mu, mu, atol=1e-12)
            np.testing.assert_allclose(kp.sigma, covariance(stack.channel(k), stack.grid, mu), atol=1e-12)
            assert kp.mass == pytest.approx(1.0)


class TestDiscretizedGaussian:
    """離散化 Gaussian のテスト。"""

    def test_normalised_sums_to_one(self):
        """normalised モードはチャネル和1。"""
        q = discretized_gaussian([5.0, 5.0, 5.0], np.diag([1.0, 2.0, 0.5]), Grid((11, 11, 11)))
        assert q.sum() == pytest.approx(1.0, abs=1e-12)

    def test_unimodal_at_mean(self):
        """11³ の中心に置いた Gaussian は平均のボクセルで最大。"""
        grid = Grid((11, 11, 11))
        q = discretized_gaussian([5.0, 5.0, 5.0], np.eye(3), grid)
        assert np.argmax(q) == 5 + 11 * 5 + 121 * 5
        assert q[5 + 11 * 5 + 121 * 5] > q[6 + 11 * 5 + 121 * 5] > q[7 + 11 * 5 + 121 * 5]

    def test_density_centre_value(self):
        """density モード、σ²=1 の中心値。"""
        q = discretized_gaussian([2.0, 2.0, 2.0], np.eye(3), Grid((5, 5, 5)), mode="density")
        expected = (2.0 * np.pi) ** -1.5 * (1.0 + COVARIANCE_RIDGE) ** -1.5
        assert q[2 + 5 * 2 + 25 * 2] == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.06349, abs=1e-5)

    def test_degenerate_sigma_finite(self):
        """Σ = 0 でもリッジにより有限。"""
        q = discretized_gaussian([1.0, 1.0, 1.0], np.zeros((3, 3)), Grid((3, 3, 3)))
        assert np.all(np.isfinite(q))
        assert q[13] == pytest.approx(1.0)

    def test_unknown_mode(self):
        """未知のモードはエラー。"""
        with pytest.raises(ValueError):
            discretized_gaussian([0.0, 0.0, 0.0], np.eye(3), Grid((2, 2, 2)), mode="exact")


class TestLossKL:
    """L_KL のテスト。"""

    def test_matched_gaussian_near_zero(self):
        """Gaussian 自身を特徴とすると KL はほぼ0。"""
        grid = Grid((11, 11, 11))
        q = discretized_gaussian([5.0, 5.0, 5.0], np.diag([1.0, 1.5, 0.8]), grid)
        features = FeatureStack(grid=grid, data=q[None, :])
        value = loss_kl(features, extract_keypoints(features))
        assert abs(value) < 1e-6

    def test_uniform_positive(self):
        """5³ 一様チャネルの KL は正。"""
        grid = Grid((5, 5, 5))
        features = FeatureStack(grid=grid, data=_uniform(grid)[None, :])
        assert loss_kl(features, extract_keypoints(features)) > 0.0

    @pytest.mark.parametrize("mode", ["normalised", "density"])
    def test_brute_force_oracle(self, mode):
        """シード付きランダムスタックで二重ループ評価と一致する。"""
        features = _random_stack(Grid((3, 3, 4)), 2, seed=9)
        kps = extract_keypoints(features)
        assert loss_kl(features, kps, mode=mode) == pytest.approx(
            _brute_force_kl(features, kps, mode), abs=1e-10
        )

    def test_normalised_non_negative(self):
        """normalised モードは真の離散 KL なので非負。"""
        for seed in range(5):
            features = _random_stack(Grid((4, 4, 4)), 3, seed=seed)
            assert loss_kl(features, extract_keypoints(features)) >= -1e-9

    def test_zero_voxels_ignored(self):
        """F=0 のボクセルは寄与しない。"""
        grid = Grid((3, 3, 3))
        channel = _delta(grid, (1, 1, 1))
        features = FeatureStack(grid=grid, data=channel[None, :])
        assert np.isfinite(loss_kl(features, extract_keypoints(features)))

    def test_unknown_mode(self):
        """未知の KL モードはエラー。"""
        features = _random_stack(Grid((2, 2, 2)), 1, seed=0)
        with pytest.raises(ValueError):
            loss_kl(features, extract_keypoints(features), mode="exact")


class TestLossVar:
    """L_var のテスト。"""

    def test_deltas_zero(self):
        """デルタ特徴では0。"""
        kps = [Keypoint(mu=np.zeros(3), sigma=np.zeros((3, 3))) for _ in range(3)]
        assert loss_var(kps) == 0.0

    def test_four_identity(self):
        """Σ = 4I の単一キーポイントで 4/√3。"""
        kps = [Keypoint(mu=np.zeros(3), sigma=4.0 * np.eye(3))]
        assert loss_var(kps) == pytest.approx(4.0 / math.sqrt(3.0), abs=1e-9)

    def test_frobenius_norm(self):
        """frobenius 形式は √Tr(ΣΣᵀ)。"""
        kps = [Keypoint(mu=np.zeros(3), sigma=4.0 * np.eye(3))]
        assert loss_var(kps, norm="frobenius") == pytest.approx(4.0 * math.sqrt(3.0), abs=1e-9)

    def test_homogeneous(self):
        """Σ の c 倍で L_var も c 倍。"""
        sigma = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 0.5]])
        base = loss_var([Keypoint(mu=np.zeros(3), sigma=sigma)])
        assert loss_var([Keypoint(mu=np.zeros(3), sigma=2.5 * sigma)]) == pytest.approx(2.5 * base)

    def test_permutation_invariant(self):
        """キーポイントの順序に依存しない。"""
        kps = [Keypoint(mu=np.zeros(3), sigma=s * np.eye(3)) for s in (1.0, 2.0, 5.0)]
        assert loss_var(kps) == pytest.approx(loss_var(kps[::-1]), abs=1e-15)

    def test_unknown_norm(self):
        """未知のノルムはエラー。"""
        with pytest.raises(ValueError):
            loss_var([Keypoint(mu=np.zeros(3), sigma=np.eye(3))], norm="nuclear")


class TestLossRep:
    """L_rep のテスト。"""

    def test_coincident_points(self):
        """一致する2点で log 2。"""
        cloud = PointCloud(np.zeros((2, 3)))
        assert loss_rep(cloud, 0.1) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_distance_equal_tau(self):
        """距離 0.1、τ=0.1 で log(1+e⁻¹)。"""
        cloud = PointCloud(np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]))
        assert loss_rep(cloud, 0.1) == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)

    def test_equilateral(self):
        """辺 10τ の正三角形は各ペア項と同じ値。"""
        tau = 0.1
        points = np.array([
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.5, math.sqrt(3.0) / 2.0, 0.0],
        ])
        expected = -math.log(expit(10.0))
        assert loss_rep(PointCloud(points), tau) == pytest.approx(expected, rel=1e-9)
        assert expected == pytest.approx(4.54e-5, abs=1e-7)

    def test_single_keypoint_zero(self):
        """K < 2 は0。"""
        assert loss_rep(PointCloud(np.zeros((1, 3))), 0.1) == 0.0

    def test_rigid_invariance(self):
        """剛体変換で値が変わらない。"""
        points = np.random.default_rng(4).normal(size=(6, 3))
        angle = 0.7
        rotation = np.array([
            [math.cos(angle), -math.sin(angle), 0.0],
            [math.sin(angle), math.cos(angle), 0.0],
            [0.0, 0.0, 1.0],
        ])
        moved = points @ rotation.T + np.array([3.0, -1.0, 2.0])
        assert loss_rep(PointCloud(moved), 0.5) == pytest.approx(loss_rep(PointCloud(points), 0.5), abs=1e-12)

    def test_monotone_in_distance(self):
        """距離が大きいほど小さい。"""
        near = PointCloud(np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]]))
        far = PointCloud(np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]))
        assert loss_rep(far, 0.1) < loss_rep(near, 0.1)

    def test_invalid_tau(self):
        """τ ≤ 0 はエラー。"""
        with pytest.raises(ValueError):
            loss_rep(PointCloud(np.zeros((2, 3))), 0.0)


class TestTotalLoss:
    """学習目的関数のテスト。"""

    def test_default_weights(self):
        """既定の重みで (0.5, 4.0, 5.0, 0.7) は 4.5507。"""
        report = total_loss(0.5, 4.0, 5.0, 0.7, LossWeights())
        assert report.total == pytest.approx(4.5507, abs=1e-12)
        assert report.l_var == 5.0

    def test_zero_weights(self):
        """重みがすべて0なら total = sim。"""
        weights = LossWeights(lambda_kl=0.0, lambda_var=0.0, lambda_rep=0.0)
        assert total_loss(0.25, 4.0, 5.0, 0.7, weights).total == 0.25

    def test_non_finite_term(self):
        """非有限の項は名前付きで失敗する。"""
        with pytest.raises(NonFiniteLossError, match="var"):
            total_loss(0.5, 4.0, float("nan"), 0.7, LossWeights())

    def test_negative_kl_flagged(self):
        """負の KL（density モード）は記録される。"""
        assert total_loss(0.5, -0.1, 0.0, 0.0, LossWeights()).kl_negative

    def test_masked_weights(self):
        """masked は指定外の λ をゼロにする。"""
        masked = LossWeights().masked(use_kl=True, use_var=False, use_rep=False)
        assert (masked.lambda_kl, masked.lambda_var, masked.lambda_rep) == (1.0, 0.0, 0.0)
        assert masked.tau == 0.1

    def test_weights_validate(self):
        """負の重みと τ ≤ 0 は検証エラー。"""
        errors = LossWeights(lambda_var=-1.0, tau=0.0).validate()
        assert len(errors) == 2

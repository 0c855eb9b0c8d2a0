"""リバースモード自動微分と勾配検証のテスト。"""

import time

import numpy as np
import pytest
from scipy import ndimage

from src.autodiff import GradientError, backward, constant, detach, grad_check, leaf, ops
from src.harness.gradcheck_suite import registered_checks
from src.keypoints.losses import keypoint_losses, repulsion_penalty
from src.models.field import Grid


class TestBackward:
    """backward のテスト。"""

    def test_identity(self):
        """根が葉そのものなら勾配は1。"""
        x = leaf(3.0)
        assert backward(x)[x] == pytest.approx(1.0)

    def test_sum_of_squares(self):
        """‖v‖² の勾配は 2v。"""
        v = leaf([1.0, 2.0, 3.0])
        grads = backward(ops.reduce_sum(ops.square(v)))
        np.testing.assert_allclose(grads[v], [2.0, 4.0, 6.0])

    def test_shared_node_accumulates(self):
        """複数経路の勾配は加算される（y = x² + x）。"""
        x = leaf(1.5)
        y = ops.add(ops.mul(x, x), x)
        assert backward(y)[x] == pytest.approx(4.0)

    def test_non_scalar_root(self):
        """非スカラーの根はエラー。"""
        with pytest.raises(GradientError):
            backward(leaf([1.0, 2.0]))

    def test_nan_names_op(self):
        """非有限の勾配は演算名付きで失敗する。"""
        x = leaf([0.0, 1.0])
        with pytest.raises(GradientError, match="sqrt"):
            backward(ops.reduce_sum(ops.sqrt(x)))

    def test_linearity(self):
        """和の逆伝播は逆伝播の和。"""
        rng = np.random.default_rng(0)
        value = rng.normal(size=(3, 4))

        def f1(x):
            return ops.reduce_sum(ops.exp(x))

        def f2(x):
            return ops.reduce_mean(ops.square(ops.sigmoid(x)))

        x = leaf(value)
        combined = backward(ops.add(f1(x), f2(x)))[x]
        x1, x2 = leaf(value), leaf(value)
        separate = backward(f1(x1))[x1] + backward(f2(x2))[x2]
        np.testing.assert_allclose(combined, separate, rtol=1e-12, atol=1e-15)

    def test_detach_blocks_gradient(self):
        """detach した経路には勾配が流れない。"""
        x = leaf(2.0)
        y = ops.mul(x, detach(x))
        assert backward(y)[x] == pytest.approx(2.0)

    def test_constant_root(self):
        """勾配を追跡しない根は空の GradientMap。"""
        assert len(backward(constant(1.0))) == 0

    def test_unreached_leaf_is_zero(self):
        """グラフに現れない葉の勾配はゼロ。"""
        x, unused = leaf(1.0), leaf([1.0, 2.0])
        np.testing.assert_array_equal(backward(ops.square(x))[unused], [0.0, 0.0])


class TestGradCheck:
    """grad_check のテスト。"""

    def test_constant_function(self):
        """定数関数は解析勾配・数値勾配とも0で合格。"""
        report = grad_check(lambda x: constant(3.0), np.ones(4), name="const")
        assert report.passed
        assert report.max_rel_err == 0.0
        np.testing.assert_array_equal(report.analytic, np.zeros(4))

    def test_detects_wrong_gradient(self):
        """誤った勾配規則は不合格になる。"""
        def wrong(x):
            return ops.reduce_sum(ops.mul(detach(x), x))

        assert not grad_check(wrong, np.array([1.0, 2.0])).passed

    def test_repulsion_two_points(self):
        """距離1、τ=0.1 の2点の反発損失。"""
        point = np.array([[0.0, 0.0, 0.0], [0.6, 0.8, 0.0]])
        report = grad_check(lambda x: repulsion_penalty(x, 0.1), point, name="rep")
        assert report.passed

    def test_kl_on_random_features(self):
        """5³ のランダム特徴マップ上の L_KL。"""
        coords = Grid((5, 5, 5)).coordinates()
        logits = np.random.default_rng(3).normal(size=(2, 125))

        def kl(x):
            return keypoint_losses(x, coords, tau=0.1)[1]

        assert grad_check(kl, logits, name="kl").passed

    def test_variance_and_repulsion_through_logits(self):
        """L_var と L_rep のロジットに対する勾配。"""
        coords = Grid((4, 4, 4)).coordinates()
        logits = np.random.default_rng(4).normal(size=(3, 64))

        def var(x):
            return keypoint_losses(x, coords, tau=0.5)[2]

        def rep(x):
            return keypoint_losses(x, coords, tau=0.5)[3]

        assert grad_check(var, logits, name="var").passed
        assert grad_check(rep, logits, name="rep").passed

    def test_report_row(self):
        """CSV 行は op, max_rel_err, pass。"""
        row = grad_check(lambda x: ops.reduce_sum(x), np.ones(2), name="sum").to_row()
        assert set(row) == {"op", "max_rel_err", "pass"}
        assert row["op"] == "sum" and row["pass"] is True


@pytest.mark.parametrize("check", registered_checks(), ids=lambda c: c.name)
def test_registered_op_gradient(check):
    """登録済みの各演算が中心差分と一致する。"""
    report = grad_check(check.function, check.point, h=check.step, tol=1e-4, name=check.name)
    assert report.passed, str(report)


class TestOps:
    """個別演算の順伝播のテスト。"""

    def test_spatial_softmax_stable(self):
        """大きなロジットでも有限で総和1。"""
        logits = np.zeros((1, 8))
        logits[0, 3] = 1000.0
        value = ops.spatial_softmax(logits).value
        assert np.all(np.isfinite(value))
        assert value[0, 3] == pytest.approx(1.0)

    def test_kabsch_rotation_proper(self):
        """反射優勢の入力でも det +1 の回転を返す。"""
        cross = np.diag([3.0, 2.0, -1.0])
        rotation = ops.kabsch_rotation(cross).value
        np.testing.assert_allclose(rotation.T @ rotation, np.eye(3), atol=1e-12)
        assert np.linalg.det(rotation) == pytest.approx(1.0)

    def test_conv3d_identity_kernel(self):
        """中心タップ1のカーネルは入力をそのまま返す。"""
        x = np.random.default_rng(0).normal(size=(1, 4, 4, 4))
        weight = np.zeros((1, 1, 3, 3, 3))
        weight[0, 0, 1, 1, 1] = 1.0
        out = ops.conv3d(x, weight, np.array([0.5])).value
        np.testing.assert_allclose(out, x + 0.5)

    def test_conv3d_input_gradient_is_convolution(self):
        """入力勾配はゼロパディングの畳み込み（随伴）と一致する。"""
        rng = np.random.default_rng(3)
        x = leaf(rng.normal(size=(2, 5, 6, 4)))
        weight = rng.normal(size=(3, 2, 3, 3, 3))
        g = rng.normal(size=(3, 5, 6, 4))
        grads = backward(ops.reduce_sum(ops.mul(ops.conv3d(x, weight, np.zeros(3)), g)))
        expected = np.stack([
            sum(ndimage.convolve(g[o], weight[o, c], mode="constant") for o in range(3))
            for c in range(2)
        ])
        np.testing.assert_allclose(grads[x], expected, atol=1e-10)

    def test_conv3d_backward_fast(self):
        """24³・8チャネルの順伝播と逆伝播は 0.5 秒未満。"""
        rng = np.random.default_rng(4)
        x = leaf(rng.normal(size=(8, 24, 24, 24)))
        weight = leaf(0.1 * rng.normal(size=(8, 8, 3, 3, 3)))
        bias = leaf(np.zeros(8))
        elapsed = []
        for _ in range(3):
            start = time.perf_counter()
            backward(ops.reduce_sum(ops.conv3d(x, weight, bias)))
            elapsed.append(time.perf_counter() - start)
        assert min(elapsed) < 0.5

    def test_trilinear_identity_exact(self):
        """恒等サンプリングは格子点で厳密。"""
        volume = np.random.default_rng(1).normal(size=(3, 4, 5))
        coords = Grid((3, 4, 5)).coordinates()
        out = ops.trilinear_sample(volume, np.eye(4), coords).value
        np.testing.assert_allclose(out, volume.ravel(order="F"), atol=1e-12)

    def test_nonfinite_check(self):
        """非有限値を演算名付きで検出する。"""
        with pytest.raises(GradientError, match="feature_sum"):
            ops.nonfinite_check(constant([1.0, np.inf]), "feature_sum")

"""グリッド・ボリューム・特徴スタック・点群のデータモデルのテスト。"""

import numpy as np
import pytest

from src.models.field import FeatureStack, Grid, PointCloud, Volume, coordinates


class TestGrid:
    """Gridデータクラスのテスト。"""

    def test_single_voxel(self):
        """1ボクセルのグリッドは原点のみ。"""
        np.testing.assert_array_equal(coordinates(Grid((1, 1, 1))), [[0.0, 0.0, 0.0]])

    def test_two_voxels_along_x(self):
        """dims (2,1,1) の座標列。"""
        np.testing.assert_array_equal(
            coordinates(Grid((2, 1, 1))),
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
        )

    def test_cube_mean(self):
        """dims (2,2,2) は8座標で平均 (0.5,0.5,0.5)。"""
        coords = Grid((2, 2, 2)).coordinates()
        assert coords.shape == (8, 3)
        np.testing.assert_allclose(coords.mean(axis=0), [0.5, 0.5, 0.5])

    def test_coordinates_unique(self):
        """座標は重複なしで |Ω| 個。"""
        grid = Grid((3, 4, 5))
        coords = grid.coordinates()
        assert len(coords) == grid.size == 60
        assert len(np.unique(coords, axis=0)) == 60

    def test_x_fastest_order(self):
        """x が最速で変化する。"""
        coords = Grid((3, 4, 5)).coordinates()
        np.testing.assert_array_equal(coords[1], [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(coords[3], [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(coords[12], [0.0, 0.0, 1.0])

    def test_invalid_dims(self):
        """不正な寸法は拒否する。"""
        with pytest.raises(ValueError):
            Grid((0, 2, 2))
        with pytest.raises(ValueError):
            Grid((2, 2))

    def test_center_and_contains(self):
        """グリッド中心とマージン付き包含判定。"""
        grid = Grid((5, 5, 5))
        np.testing.assert_allclose(grid.center(), [2.0, 2.0, 2.0])
        assert grid.contains(np.array([[1.0, 1.0, 3.0]]), margin=1.0)
        assert not grid.contains(np.array([[0.5, 2.0, 2.0]]), margin=1.0)


class TestVolume:
    """Volumeデータクラスのテスト。"""

    def test_flat_order_matches_coordinates(self):
        """線形化は座標列と同じ x 最速順。"""
        grid = Grid((3, 2, 2))
        coords = grid.coordinates()
        volume = Volume.from_flat(grid, coords[:, 0] + 10 * coords[:, 1] + 100 * coords[:, 2])
        assert volume.data[2, 1, 0] == 12.0
        np.testing.assert_array_equal(volume.flat(), coords[:, 0] + 10 * coords[:, 1] + 100 * coords[:, 2])

    def test_size_mismatch(self):
        """値の数がグリッドと合わない場合はエラー。"""
        with pytest.raises(ValueError):
            Volume(grid=Grid((3, 3, 3)), data=np.zeros(26))

    def test_non_finite_rejected(self):
        """非有限値は拒否する。"""
        data = np.zeros((2, 2, 2))
        data[0, 1, 1] = np.nan
        with pytest.raises(ValueError):
            Volume(grid=Grid((2, 2, 2)), data=data)

    def test_zeros(self):
        """ゼロ場の作成。"""
        volume = Volume.zeros(Grid((2, 3, 4)))
        assert volume.data.shape == (2, 3, 4)
        assert not volume.data.any()


class TestFeatureStack:
    """FeatureStackデータクラスのテスト。"""

    def test_four_dimensional_input(self):
        """(K, nx, ny, nz) 入力は x 最速で線形化される。"""
        grid = Grid((2, 3, 4))
        data = np.arange(2 * 24, dtype=np.float64).reshape(2, 2, 3, 4)
        stack = FeatureStack(grid=grid, data=data)
        assert stack.channels == 2
        np.testing.assert_array_equal(stack.channel(1), data[1].ravel(order="F"))

    def test_is_normalized(self):
        """各チャネルの総和1と非負性。"""
        grid = Grid((2, 2, 2))
        assert FeatureStack(grid=grid, data=np.full((3, 8), 1.0 / 8)).is_normalized()
        assert not FeatureStack(grid=grid, data=np.full((3, 8), 1.0)).is_normalized()

    def test_shape_mismatch(self):
        """グリッドと合わない形状はエラー。"""
        with pytest.raises(ValueError):
            FeatureStack(grid=Grid((2, 2, 2)), data=np.zeros((3, 7)))


class TestPointCloud:
    """PointCloudデータクラスのテスト。"""

    def test_pairwise_distances_order(self):
        """ペア距離は k < k' の上三角順。"""
        cloud = PointCloud(np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0], [0.0, 0.0, 1.0]]))
        np.testing.assert_allclose(cloud.pairwise_distances(), [5.0, 1.0, np.sqrt(26.0)])

    def test_invalid_shape(self):
        """(K, 3) 以外はエラー。"""
        with pytest.raises(ValueError):
            PointCloud(np.zeros((4, 2)))

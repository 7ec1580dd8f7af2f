import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxlo.maps import (
    EmptyLayerError,
    HashedVoxelLayer,
    MapError,
    MetricMap,
    MissingLayerError,
    OccupancyVoxelLayer,
    PointCloudLayer,
    bounding_box,
    decode_voxel_keys,
    encode_voxel_keys,
    hashed_insert,
    nn_search,
    occupancy_update_ray,
    voxel_index,
)


def brute_force_nn(points: np.ndarray, q: np.ndarray, max_dist: float):
    """Exhaustive oracle: nearest stored point within max_dist, lowest index wins."""
    if len(points) == 0:
        return None
    d = np.linalg.norm(points - q, axis=1)
    i = int(np.argmin(d))  # argmin returns the first (lowest-index) minimum
    if d[i] > max_dist:
        return None
    return i, d[i]


class TestVoxelIndex:
    def test_inside_cell(self):
        assert np.array_equal(voxel_index([0.2, 0.2, 0.2], 0.5), [0, 0, 0])

    def test_negative_floor(self):
        assert np.array_equal(voxel_index([-0.1, 0.0, 0.0], 0.5), [-1, 0, 0])

    def test_boundary_belongs_to_upper_cell(self):
        assert np.array_equal(voxel_index([0.5, 0.0, 0.0], 0.5), [1, 0, 0])

    def test_key_roundtrip(self):
        idx = np.array([[0, 0, 0], [-1, 5, 7], [1000, -1000, 3]], dtype=np.int64)
        assert np.array_equal(decode_voxel_keys(encode_voxel_keys(idx)), idx)

    def test_key_out_of_range(self):
        with pytest.raises(MapError):
            encode_voxel_keys(np.array([2**21, 0, 0]))


class TestHashedVoxelLayer:
    def test_first_insert_accepted(self):
        layer = HashedVoxelLayer(resolution=1.0, max_points_per_voxel=20)
        assert hashed_insert(layer, [0.1, 0.1, 0.1])
        assert layer.voxel_count == 1
        assert layer.point_count == 1

    def test_voxel_cap_rejects_21st_point(self):
        layer = HashedVoxelLayer(resolution=1.0, max_points_per_voxel=20)
        rng = np.random.default_rng(0)
        for i in range(20):
            assert layer.insert(rng.uniform(0, 0.999, size=3))
        assert not layer.insert([0.5, 0.5, 0.5])
        assert layer.point_count == 20

    def test_nan_rejected_with_error(self):
        layer = HashedVoxelLayer(resolution=1.0)
        with pytest.raises(MapError):
            layer.insert([np.nan, 0, 0])

    def test_batch_insert_respects_cap_across_calls(self):
        layer = HashedVoxelLayer(resolution=10.0, max_points_per_voxel=3)
        pts = np.random.default_rng(1).uniform(0, 9, size=(10, 3))
        acc = layer.insert_points(pts)
        assert acc.sum() == 3
        assert np.array_equal(np.where(acc)[0], [0, 1, 2])
        assert not layer.insert_points(pts[:1])[0]

    def test_points_map_to_their_voxel_key(self):
        layer = HashedVoxelLayer(resolution=0.4, max_points_per_voxel=5)
        rng = np.random.default_rng(2)
        layer.insert_points(rng.normal(scale=3.0, size=(500, 3)))
        pts = layer.points_in_insertion_order()
        for idx3 in np.unique(voxel_index(pts, 0.4), axis=0)[:20]:
            vox_pts = layer.voxel_points(idx3)
            assert len(vox_pts) >= 1
            assert np.all(voxel_index(vox_pts, 0.4) == idx3)

    def test_bounding_box_over_voxel_corners(self):
        layer = HashedVoxelLayer(resolution=0.5)
        layer.insert_points(np.array([[0.1, 0.1, 0.1], [1.2, 2.3, 3.4]]))
        lo, hi = bounding_box(layer)
        assert np.allclose(lo, [0.0, 0.0, 0.0])
        assert np.allclose(hi, [1.5, 2.5, 3.5])

    def test_empty_bounding_box_errors(self):
        with pytest.raises(EmptyLayerError):
            HashedVoxelLayer(1.0).bounding_box()


class TestNNSearch:
    def test_basic_hit(self):
        layer = HashedVoxelLayer(resolution=0.5)
        layer.insert_points(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        pt, dist = nn_search(layer, [0.2, 0, 0], 0.5)
        assert np.allclose(pt, [0, 0, 0])
        assert abs(dist - 0.2) < 1e-12

    def test_miss_returns_none(self):
        layer = HashedVoxelLayer(resolution=0.5)
        layer.insert_points(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        assert nn_search(layer, [5.0, 0, 0], 0.5) is None

    def test_equidistant_tie_lowest_insertion_index(self):
        layer = HashedVoxelLayer(resolution=0.5)
        layer.insert_points(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        pt, dist = nn_search(layer, [0.5, 0, 0], 0.6)
        assert np.allclose(pt, [0, 0, 0])
        # and with reversed insertion order the other point wins
        layer2 = HashedVoxelLayer(resolution=0.5)
        layer2.insert_points(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))
        pt2, _ = nn_search(layer2, [0.5, 0, 0], 0.6)
        assert np.allclose(pt2, [1.0, 0, 0])

    @pytest.mark.parametrize("res,max_dist", [(0.5, 0.4), (0.5, 1.3), (1.0, 2.5)])
    def test_matches_brute_force_oracle(self, res, max_dist):
        rng = np.random.default_rng(int(res * 10 + max_dist))
        layer = HashedVoxelLayer(resolution=res, max_points_per_voxel=20)
        pts = rng.uniform(-5, 5, size=(2000, 3))
        acc = layer.insert_points(pts)
        stored = pts[acc]
        queries = rng.uniform(-6, 6, size=(300, 3))
        found, nn_pts, dists, idx = layer.nearest_neighbors(queries, max_dist)
        for i, q in enumerate(queries):
            expect = brute_force_nn(stored, q, max_dist)
            if expect is None:
                assert not found[i]
            else:
                j, d = expect
                assert found[i]
                assert abs(dists[i] - d) < 1e-12
                assert idx[i] == j
                assert np.allclose(nn_pts[i], stored[j])

    def test_point_cloud_layer_matches_brute_force(self):
        rng = np.random.default_rng(42)
        pts = rng.uniform(-3, 3, size=(1000, 3))
        layer = PointCloudLayer(pts)
        queries = rng.uniform(-4, 4, size=(200, 3))
        found, nn_pts, dists, idx = layer.nearest_neighbors(queries, 0.8)
        for i, q in enumerate(queries):
            expect = brute_force_nn(pts, q, 0.8)
            if expect is None:
                assert not found[i]
            else:
                j, d = expect
                assert found[i] and abs(dists[i] - d) < 1e-12 and idx[i] == j

    def test_invalid_max_dist(self):
        layer = HashedVoxelLayer(1.0)
        with pytest.raises(MapError):
            layer.nearest_neighbors(np.zeros((1, 3)), 0.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=10_000))
    def test_cap_invariant_property(self, cap, seed):
        rng = np.random.default_rng(seed)
        layer = HashedVoxelLayer(resolution=1.0, max_points_per_voxel=cap)
        layer.insert_points(rng.uniform(-2, 2, size=(120, 3)))
        pts = layer.points_in_insertion_order()
        keys = encode_voxel_keys(voxel_index(pts, 1.0))
        _, counts = np.unique(keys, return_counts=True)
        assert counts.max() <= cap


class TestPointCloudLayer:
    def test_channel_length_mismatch(self):
        with pytest.raises(MapError):
            PointCloudLayer(np.zeros((3, 3)), time=np.zeros(2))

    def test_extend_concatenates(self):
        a = PointCloudLayer(np.zeros((2, 3)), time=np.array([0.0, 0.1]))
        b = PointCloudLayer(np.ones((3, 3)), time=np.array([0.2, 0.3, 0.4]))
        a.extend(b)
        assert len(a) == 5
        assert np.allclose(a.time, [0.0, 0.1, 0.2, 0.3, 0.4])

    def test_bounding_box(self):
        layer = PointCloudLayer(np.array([[0.0, 0, 0], [1, 2, 3]]))
        lo, hi = layer.bounding_box()
        assert np.allclose(lo, [0, 0, 0]) and np.allclose(hi, [1, 2, 3])
        single = PointCloudLayer(np.array([[4.0, 5, 6]]))
        lo, hi = single.bounding_box()
        assert np.allclose(lo, hi)
        layer.extend(PointCloudLayer(np.array([[-1.0, 0, 0]])))
        assert layer.bounding_box()[0][0] == -1.0


class TestOccupancy:
    def test_axis_aligned_ray_dda_oracle(self):
        res = 0.5
        layer = OccupancyVoxelLayer(resolution=res)
        occupancy_update_ray(layer, [0, 0, 0], [2.5 * res, 0, 0])
        assert layer.logodds([0, 0, 0]) == pytest.approx(layer.l_free)
        assert layer.logodds([1, 0, 0]) == pytest.approx(layer.l_free)
        assert layer.logodds([2, 0, 0]) == pytest.approx(layer.l_occ)
        assert layer.occupancy([2, 0, 0]) > 0.5
        assert layer.occupancy([0, 0, 0]) < 0.5

    def test_diagonal_ray_traverses_contiguous_voxels(self):
        layer = OccupancyVoxelLayer(resolution=1.0)
        layer.update_ray([0.5, 0.5, 0.5], [3.2, 2.7, 0.5])
        visited = layer.voxel_indices()
        # 6-connected chain from (0,0,0) to (3,2,0)
        assert np.array_equal(visited[0], [0, 0, 0])
        assert any(np.array_equal(v, [3, 2, 0]) for v in visited)
        steps = np.abs(np.diff(visited[np.lexsort(visited.T[::-1])], axis=0)).sum(axis=1)
        assert np.all(steps >= 1)

    def test_repeated_ray_clamps(self):
        layer = OccupancyVoxelLayer(resolution=0.5)
        for _ in range(20):
            layer.update_ray([0, 0, 0], [1.1, 0, 0])
        assert layer.logodds([2, 0, 0]) == pytest.approx(layer.l_max)
        for _ in range(40):
            layer.update_ray([0, 0, 0], [5.0, 0, 0])
        assert layer.logodds([2, 0, 0]) == pytest.approx(layer.l_min)

    def test_degenerate_ray_errors(self):
        layer = OccupancyVoxelLayer(resolution=0.5)
        with pytest.raises(MapError):
            layer.update_ray([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])

    def test_unobserved_occupancy_is_half(self):
        layer = OccupancyVoxelLayer(resolution=0.5)
        assert layer.occupancy([17, -3, 2]) == pytest.approx(0.5)
        occ = layer.occupancy_at_points(np.array([[0.1, 0.2, 0.3]]))
        assert occ[0] == pytest.approx(0.5)

    def test_occupancy_open_interval(self):
        layer = OccupancyVoxelLayer(resolution=0.5)
        for _ in range(30):
            layer.update_ray([0, 0, 0], [1.1, 0, 0])
        for idx in layer.voxel_indices():
            assert 0.0 < layer.occupancy(idx) < 1.0

    def test_batch_matches_sequential(self):
        rng = np.random.default_rng(3)
        ends = rng.uniform(-3, 3, size=(50, 3))
        a = OccupancyVoxelLayer(resolution=0.4)
        a.update_rays([0.1, 0.1, 0.1], ends)
        b = OccupancyVoxelLayer(resolution=0.4)
        for e in ends:
            b.update_ray([0.1, 0.1, 0.1], e)
        ia = a.voxel_indices()
        ib = b.voxel_indices()
        assert np.array_equal(ia, ib)
        for idx in ia:
            assert a.logodds(idx) == pytest.approx(b.logodds(idx), abs=1e-12)

    def test_occupancy_bounding_box(self):
        layer = OccupancyVoxelLayer(resolution=1.0)
        layer.update_ray([0.5, 0.5, 0.5], [2.5, 0.5, 0.5])
        lo, hi = layer.bounding_box()
        assert np.allclose(lo, [0, 0, 0])
        assert np.allclose(hi, [3, 1, 1])


class TestMetricMap:
    def test_layer_lookup(self):
        mm = MetricMap()
        mm.set_layer("cloud", PointCloudLayer())
        assert "cloud" in mm
        with pytest.raises(MissingLayerError):
            mm.layer("nope")

    def test_variables(self):
        mm = MetricMap()
        mm.variables["max_range"] = 80.0
        assert mm.variables["max_range"] == 80.0

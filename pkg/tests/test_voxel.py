"""Voxelization against a group-then-average oracle, offsets arithmetic,
exact kNN against exhaustive scan."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvxseg.voxel import (PointCloudFrame, SparseVoxelGrid, knn, pack_keys,
                          point_offsets, re_voxelize, voxelize)


def _rng(seed=0):
    return np.random.default_rng(seed)


def oracle_voxelize(features, positions, v):
    """Independent group-then-average: python dict grouping, ascending point order."""
    groups = {}
    for i, p in enumerate(positions):
        key = tuple(int(np.floor(c / v)) for c in p)
        groups.setdefault(key, []).append(i)
    keys = sorted(groups)
    coords = np.array(keys, dtype=np.int32).reshape(-1, 3)
    feats = np.zeros((len(keys), features.shape[1]), dtype=features.dtype)
    p2v = np.zeros(len(positions), dtype=np.int64)
    for row, key in enumerate(keys):
        members = groups[key]
        acc = np.zeros(features.shape[1], dtype=features.dtype)
        for i in members:
            acc = acc + features[i]
            p2v[i] = row
        feats[row] = acc / len(members)
    return coords, feats, p2v


class TestVoxelize:
    def test_single_point(self):
        grid, p2v = voxelize(np.array([[7.0]]), np.array([[0.12, 0.03, -0.40]]), 0.5)
        np.testing.assert_array_equal(grid.coords, [[0, 0, -1]])
        np.testing.assert_array_equal(grid.features.data, [[7.0]])
        np.testing.assert_array_equal(p2v, [0])

    def test_matches_grouping_oracle_bit_identical(self):
        rng = _rng(1)
        pos = rng.uniform(-8, 8, size=(1000, 3))
        feats = rng.normal(size=(1000, 4)).astype(np.float32)
        grid, p2v = voxelize(feats, pos, 0.5)
        o_coords, o_feats, o_p2v = oracle_voxelize(feats, pos, 0.5)
        np.testing.assert_array_equal(grid.coords, o_coords)
        np.testing.assert_array_equal(p2v, o_p2v)
        # summation order is ascending point index on both paths
        np.testing.assert_array_equal(grid.features.data, o_feats)

    def test_large_single_group_still_bit_identical(self):
        # one voxel holding 20k float32 rows: accumulation order must stay sequential
        rng = _rng(9)
        feats = rng.normal(size=(20000, 3)).astype(np.float32)
        pos = rng.uniform(0.0, 0.49, size=(20000, 3))
        grid, _ = voxelize(feats, pos, 0.5)
        acc = np.zeros(3, dtype=np.float32)
        for row in feats:
            acc = acc + row
        np.testing.assert_array_equal(grid.features.data[0], acc / np.float32(20000))

    def test_rows_lexicographically_sorted(self):
        rng = _rng(2)
        grid, _ = voxelize(rng.normal(size=(200, 2)), rng.uniform(-5, 5, (200, 3)), 0.3)
        assert (np.diff(pack_keys(grid.coords)) > 0).all()

    def test_mass_conservation(self):
        rng = _rng(3)
        pos = rng.uniform(-4, 4, size=(500, 3))
        feats = rng.normal(size=(500, 3))
        grid, p2v = voxelize(feats, pos, 0.5)
        counts = np.bincount(p2v, minlength=grid.n_voxels)
        np.testing.assert_allclose(
            (grid.features.data * counts[:, None]).sum(axis=0),
            feats.sum(axis=0), atol=1e-5)

    def test_rejects_nonpositive_voxel_size(self):
        with pytest.raises(ValueError):
            voxelize(np.ones((1, 1)), np.zeros((1, 3)), 0.0)


class TestPointOffsets:
    def test_center_point_has_zero_offset(self):
        pos = np.array([[0.25, 0.25, 0.25]])
        grid, p2v = voxelize(np.ones((1, 1)), pos, 0.5)
        np.testing.assert_allclose(point_offsets(pos, grid, p2v), 0.0, atol=1e-12)

    def test_hand_case(self):
        pos = np.array([[0.12, 0.03, -0.40]])
        grid, p2v = voxelize(np.ones((1, 1)), pos, 0.5)
        np.testing.assert_allclose(point_offsets(pos, grid, p2v),
                                   [[-0.13, -0.22, -0.15]], atol=1e-12)

    def test_offsets_in_half_open_range(self):
        rng = _rng(4)
        pos = rng.uniform(-10, 10, size=(800, 3))
        grid, p2v = voxelize(np.ones((800, 1)), pos, 0.5)
        off = point_offsets(pos, grid, p2v)
        assert (off >= -0.25).all() and (off < 0.25).all()

    def test_point_outside_grid_raises(self):
        grid, _ = voxelize(np.ones((1, 1)), np.zeros((1, 3)), 0.5)
        with pytest.raises(ValueError, match="outside"):
            point_offsets(np.array([[5.0, 5.0, 5.0]]), grid)


class TestReVoxelize:
    def test_identity_on_own_centers(self):
        rng = _rng(5)
        grid, _ = voxelize(rng.normal(size=(300, 3)), rng.uniform(-5, 5, (300, 3)), 0.5)
        again = re_voxelize(grid, grid.centers(), 0.5)
        np.testing.assert_array_equal(again.coords, grid.coords)
        np.testing.assert_array_equal(again.features.data, grid.features.data)

    def test_collision_averages(self):
        grid = SparseVoxelGrid(0.5, np.array([[0, 0, 0], [1, 0, 0]]),
                               np.array([[1.0, 3.0], [3.0, 5.0]]))
        merged = re_voxelize(grid, np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]]), 0.5)
        assert merged.n_voxels == 1
        np.testing.assert_allclose(merged.features.data, [[2.0, 4.0]])

    def test_matches_voxelize_oracle_bit_identical(self):
        rng = _rng(6)
        grid, _ = voxelize(rng.normal(size=(400, 2)).astype(np.float32),
                           rng.uniform(-6, 6, (400, 3)), 0.25)
        coarse = re_voxelize(grid, grid.centers(), 1.0)
        direct, _ = voxelize(grid.features.data, grid.centers(), 1.0)
        np.testing.assert_array_equal(coarse.coords, direct.coords)
        np.testing.assert_array_equal(coarse.features.data, direct.features.data)


def oracle_knn(queries, source_pos, k):
    """Exhaustive scan with explicit (distance, rank) ordering."""
    out = []
    for q in queries:
        d2 = ((source_pos - q) ** 2).sum(axis=1)
        order = sorted(range(len(source_pos)), key=lambda i: (d2[i], i))
        out.append(order[:k])
    return np.array(out)


class TestKnn:
    def test_query_at_center_distance_zero(self):
        grid, _ = voxelize(np.ones((4, 1)),
                           np.array([[0.1, 0.1, 0.1], [1.1, 0.1, 0.1],
                                     [0.1, 1.3, 0.1], [2.2, 2.2, 0.1]]), 1.0)
        res = knn(grid.centers()[2:3], grid, k=1)
        assert res.indices[0, 0] == 2
        np.testing.assert_allclose(res.offsets[0, 0], 0.0, atol=1e-12)

    def test_matches_exhaustive_scan_200x500(self):
        rng = _rng(7)
        pos = rng.uniform(-10, 10, size=(500, 3))
        grid, _ = voxelize(np.ones((500, 1)), pos, 0.4)
        queries = rng.uniform(-10, 10, size=(200, 3))
        res = knn(queries, grid, k=5)
        expected = oracle_knn(queries, grid.centers(), 5)
        np.testing.assert_array_equal(res.indices, expected)

    def test_lattice_ties_break_by_key(self):
        # four centers equidistant from the query: lexicographically smallest win
        coords = np.array([[1, 0, 0], [-2, 0, 0], [0, 1, 0], [0, -2, 0]])
        grid = SparseVoxelGrid(1.0, coords, np.ones((4, 1)))
        res = knn(np.array([[0.0, 0.0, 0.5]]), grid, k=2)
        expected = oracle_knn(np.array([[0.0, 0.0, 0.5]]), grid.centers(), 2)
        np.testing.assert_array_equal(res.indices, expected)

    def test_point_source_and_self_exclusion(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.5, 0, 0]])
        res = knn(pts, pts, k=2, exclude_self=True)
        np.testing.assert_array_equal(res.indices[0], [1, 2])
        np.testing.assert_array_equal(res.indices[3], [2, 1])

    def test_fewer_sources_than_k_pads(self):
        res = knn(np.zeros((1, 3)), np.array([[1.0, 0, 0], [0, 1.0, 0]]), k=5)
        assert res.counts[0] == 2
        np.testing.assert_array_equal(res.indices[0, 2:], -1)

    def test_empty_source_raises(self):
        with pytest.raises(ValueError, match="empty"):
            knn(np.zeros((1, 3)), np.zeros((0, 3)), k=1)

    def test_neighbor_positions_permutation_invariant(self):
        rng = _rng(8)
        pts = rng.normal(size=(60, 3))
        perm = rng.permutation(60)
        q = rng.normal(size=(10, 3))
        a = knn(q, pts, k=4)
        b = knn(q, pts[perm], k=4)
        np.testing.assert_allclose(np.sort(pts[a.indices], axis=1),
                                   np.sort(pts[perm][b.indices], axis=1), atol=1e-12)


class TestFrame:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            PointCloudFrame(np.array([[np.inf, 0, 0]]), np.array([1.0]))

    def test_empty_frame_allowed(self):
        f = PointCloudFrame(np.zeros((0, 3)), np.zeros(0))
        assert f.n_points == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=60), st.integers(min_value=0, max_value=10 ** 6))
def test_voxelize_then_revoxelize_identity_property(n, seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-5, 5, size=(n, 3))
    feats = rng.normal(size=(n, 2))
    grid, _ = voxelize(feats, pos, 0.5)
    again = re_voxelize(grid, grid.centers(), 0.5)
    np.testing.assert_array_equal(again.coords, grid.coords)
    np.testing.assert_array_equal(again.features.data, grid.features.data)

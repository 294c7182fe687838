"""Sparse convolutions against dense oracles, adjointness of the transposed
pair, and the gated memory refinement."""

import itertools

import numpy as np
import pytest

from mvxseg import tensor as T
from mvxseg.gradcheck import check_gradients
from mvxseg.sparseconv import (GateBlock, GruParams, SparseConvLayer,
                               gru_update, sparse_conv, sparse_transpose_conv)
from mvxseg.voxel import SparseVoxelGrid, pack_keys


def _rng(seed=0):
    return np.random.default_rng(seed)


def _grid(coords, feats, v=0.5):
    coords = np.asarray(coords, dtype=np.int32)
    order = np.argsort(pack_keys(coords))
    return SparseVoxelGrid(v, coords[order], np.asarray(feats, dtype=np.float64)[order])


def _full_grid(side, width, seed=0, v=0.5):
    coords = np.array(list(itertools.product(range(side), repeat=3)), dtype=np.int32)
    feats = _rng(seed).normal(size=(len(coords), width))
    return _grid(coords, feats, v)


def dense_conv_oracle(grid, kernel, bias, side):
    """Zero-padded dense 3D convolution, gather convention out[p] = sum in[p+d] W[d]."""
    k = kernel.shape[0]
    r = (k - 1) // 2
    c_out = kernel.shape[4]
    vol = np.zeros((side, side, side, kernel.shape[3]))
    for c, f in zip(grid.coords, grid.features.data):
        vol[tuple(c)] = f
    out = np.zeros((side, side, side, c_out))
    for p in itertools.product(range(side), repeat=3):
        acc = np.array(bias, dtype=np.float64).copy()
        for d in itertools.product(range(-r, r + 1), repeat=3):
            q = tuple(np.add(p, d))
            if all(0 <= qi < side for qi in q):
                acc = acc + vol[q] @ kernel[d[0] + r, d[1] + r, d[2] + r]
        out[p] = acc
    return out


class TestSparseConv:
    def test_k1_identity_kernel_passes_through(self):
        grid = _full_grid(2, 3, seed=1)
        layer = SparseConvLayer(T.constant(np.eye(3).reshape(1, 1, 1, 3, 3)),
                                T.constant(np.zeros(3)))
        out = sparse_conv(grid, layer)
        np.testing.assert_array_equal(out.features.data, grid.features.data)
        np.testing.assert_array_equal(out.coords, grid.coords)

    def test_full_4cube_matches_dense_oracle(self):
        grid = _full_grid(4, 2, seed=2)
        layer = SparseConvLayer.create(_rng(3), 3, 2, 5, dtype=np.float64)
        out = sparse_conv(grid, layer)
        dense = dense_conv_oracle(grid, layer.kernel.data, layer.bias.data, 4)
        for c, f in zip(out.coords, out.features.data):
            np.testing.assert_allclose(f, dense[tuple(c)], atol=1e-5)

    def test_isolated_voxel_sees_only_center_tap(self):
        grid = _grid([[5, -3, 2]], [[1.0, -2.0]])
        layer = SparseConvLayer.create(_rng(4), 3, 2, 3, dtype=np.float64)
        out = sparse_conv(grid, layer)
        center = layer.kernel.data[1, 1, 1]
        np.testing.assert_allclose(out.features.data,
                                   grid.features.data @ center + layer.bias.data,
                                   atol=1e-12)

    def test_width_mismatch_raises(self):
        grid = _full_grid(2, 3)
        layer = SparseConvLayer.create(_rng(5), 3, 4, 2)
        with pytest.raises(ValueError, match="width"):
            sparse_conv(grid, layer)

    def test_stride2_coords_are_halved_and_deduplicated(self):
        grid = _grid([[0, 0, 0], [1, 1, 1], [2, 0, 0], [-1, 0, 0], [-2, 0, 0]],
                     _rng(6).normal(size=(5, 2)))
        layer = SparseConvLayer.create(_rng(7), 2, 2, 2, stride=2, dtype=np.float64)
        out = sparse_conv(grid, layer)
        expected = sorted({tuple(c // 2) for c in grid.coords.astype(np.int64)})
        assert [tuple(c) for c in out.coords] == expected
        assert out.voxel_size == grid.voxel_size * 2


class TestTransposeConv:
    def test_down_then_up_restores_coordinates(self):
        grid = _full_grid(3, 2, seed=8)
        down = SparseConvLayer.create(_rng(9), 2, 2, 4, stride=2, dtype=np.float64)
        up = SparseConvLayer.create(_rng(10), 2, 4, 2, stride=2, transposed=True,
                                    dtype=np.float64)
        mid = sparse_conv(grid, down)
        restored = sparse_transpose_conv(mid, up, grid.coords)
        np.testing.assert_array_equal(restored.coords, grid.coords)
        assert restored.voxel_size == grid.voxel_size

    def test_adjoint_identity(self):
        rng = _rng(11)
        grid = _grid(rng.integers(-3, 4, size=(30, 3)), rng.normal(size=(30, 3)))
        # duplicate coords collapse inside _grid? build unique instead
        coords = np.unique(rng.integers(-3, 4, size=(40, 3)), axis=0)
        x = rng.normal(size=(len(coords), 3))
        grid = _grid(coords, x)
        w = rng.normal(size=(2, 2, 2, 3, 5))
        down = SparseConvLayer(T.constant(w), T.constant(np.zeros(5)), stride=2)
        up = SparseConvLayer(T.constant(np.ascontiguousarray(w.swapaxes(3, 4))),
                             T.constant(np.zeros(3)), stride=2, transposed=True)
        y = sparse_conv(grid, down)
        v = rng.normal(size=y.features.data.shape)
        vy = SparseVoxelGrid(y.voxel_size, y.coords, v, keys=y.keys)
        u = sparse_transpose_conv(vy, up, grid.coords)
        lhs = float((y.features.data * v).sum())
        rhs = float((grid.features.data * u.features.data).sum())
        assert abs(lhs - rhs) < 1e-5 * max(1.0, abs(lhs))

    def test_zero_input_gives_zero_output(self):
        grid = _grid([[0, 0, 0], [1, 0, 0]], np.zeros((2, 3)))
        down = SparseConvLayer.create(_rng(12), 2, 3, 3, stride=2, dtype=np.float64)
        up = SparseConvLayer(down.kernel, T.constant(np.zeros(3)), stride=2,
                             transposed=True)
        mid = sparse_conv(grid, down)
        out = sparse_transpose_conv(mid, up, grid.coords)
        np.testing.assert_array_equal(out.features.data, 0.0)

    def test_missing_target_cache_raises(self):
        grid = _full_grid(2, 2)
        up = SparseConvLayer.create(_rng(13), 2, 2, 2, stride=2, transposed=True)
        with pytest.raises(ValueError, match="coordinate"):
            sparse_transpose_conv(grid, up, None)


def _pair(seed, n=20, width=3, v=0.5):
    rng = _rng(seed)
    coords = np.unique(rng.integers(-2, 3, size=(n, 3)), axis=0)
    order = np.argsort(pack_keys(coords.astype(np.int32)))
    coords = coords[order].astype(np.int32)
    obs = SparseVoxelGrid(v, coords, rng.normal(size=(len(coords), width)))
    mem = SparseVoxelGrid(v, coords, rng.normal(size=(len(coords), width)))
    return obs, mem


def _force_gate(gate: GateBlock, bias_value: float):
    gate.conv_out.bias.data = np.full_like(gate.conv_out.bias.data, bias_value)
    gate.conv_out.kernel.data = np.zeros_like(gate.conv_out.kernel.data)


class TestGruUpdate:
    def test_forced_zero_update_gate_returns_memory(self):
        obs, mem = _pair(14)
        params = GruParams.create(_rng(15), 3, dtype=np.float64)
        _force_gate(params.update_gate, -50.0)
        out = gru_update(obs, mem, params)
        np.testing.assert_allclose(out.features.data, mem.features.data, atol=1e-4)

    def test_forced_full_update_bounded_by_tanh(self):
        obs, mem = _pair(16)
        mem.features.data *= 10  # large memory values must be ignored at z=1
        params = GruParams.create(_rng(17), 3, dtype=np.float64)
        _force_gate(params.update_gate, 50.0)
        out = gru_update(obs, mem, params)
        assert (np.abs(out.features.data) < 1.0).all()

    def test_coordinate_set_invariant_and_bound(self):
        obs, mem = _pair(18)
        params = GruParams.create(_rng(19), 3, dtype=np.float64)
        out = gru_update(obs, mem, params)
        np.testing.assert_array_equal(out.coords, obs.coords)
        bound = np.maximum(1.0, np.abs(mem.features.data).max())
        assert (np.abs(out.features.data) <= bound + 1e-9).all()

    def test_misaligned_rows_rejected(self):
        obs, mem = _pair(20)
        mem2 = SparseVoxelGrid(mem.voxel_size, mem.coords[:-1], mem.features.data[:-1])
        with pytest.raises(ValueError, match="share"):
            gru_update(obs, mem2, params=GruParams.create(_rng(21), 3))

    def test_full_2cube_matches_dense_reference(self):
        # fully occupied 2x2x2 grid: every sparse op has an exact dense analog
        rng = _rng(22)
        coords = np.array(list(itertools.product(range(2), repeat=3)), dtype=np.int32)
        order = np.argsort(pack_keys(coords))
        coords = coords[order]
        d = 2
        obs = SparseVoxelGrid(0.5, coords, rng.normal(size=(8, d)))
        mem = SparseVoxelGrid(0.5, coords, rng.normal(size=(8, d)))
        params = GruParams.create(_rng(23), d, dtype=np.float64)
        out = gru_update(obs, mem, params, training=False)

        def dense_gate(gate: GateBlock, x):
            def bn(h, bnorm):
                return (h - bnorm.running_mean) / np.sqrt(bnorm.running_var + bnorm.eps) \
                    * bnorm.gamma.data + bnorm.beta.data

            def lrelu(h):
                return np.where(h > 0, h, 0.01 * h)

            def subm(h, layer):
                out_ = np.zeros((8, layer.out_width))
                for i, p in enumerate(coords):
                    acc = layer.bias.data.copy()
                    for dd in itertools.product((-1, 0, 1), repeat=3):
                        q = p + np.array(dd)
                        if ((q >= 0) & (q < 2)).all():
                            j = int(np.flatnonzero((coords == q).all(axis=1))[0])
                            acc = acc + h[j] @ layer.kernel.data[dd[0] + 1, dd[1] + 1, dd[2] + 1]
                    out_[i] = acc
                return out_

            h = lrelu(bn(subm(x, gate.conv_in), gate.bn1))
            # stride-2 down: all 8 sites merge into one output at (0,0,0)
            down = gate.conv_down.bias.data.copy()
            for i, p in enumerate(coords):
                down = down + h[i] @ gate.conv_down.kernel.data[p[0], p[1], p[2]]
            down = lrelu(bn(down[None, :], gate.bn2))[0]
            up = np.zeros((8, gate.conv_up.out_width))
            for i, p in enumerate(coords):
                up[i] = down @ gate.conv_up.kernel.data[p[0], p[1], p[2]] + gate.conv_up.bias.data
            up = lrelu(bn(up, gate.bn3))
            return subm(up, gate.conv_out)

        x, h = obs.features.data, mem.features.data
        xh = np.hstack([x, h])
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        r = sig(dense_gate(params.reset_gate, xh))
        z = sig(dense_gate(params.update_gate, xh))
        cand = np.tanh(dense_gate(params.candidate, np.hstack([x, r * h])))
        expected = cand * z + h * (1 - z)
        np.testing.assert_allclose(out.features.data, expected, atol=1e-4)

    def test_gradients_through_gates(self):
        obs, mem = _pair(24, n=10, width=2)
        params = GruParams.create(_rng(25), 2, dtype=np.float64)
        obs_feats = T.parameter(obs.features.data.copy(), dtype=np.float64)
        mem_feats = T.parameter(mem.features.data.copy(), dtype=np.float64)

        def loss_fn():
            o = SparseVoxelGrid(obs.voxel_size, obs.coords, obs_feats, keys=obs.keys)
            m = SparseVoxelGrid(mem.voxel_size, mem.coords, mem_feats, keys=mem.keys)
            return T.sum_all(T.mul(gru_update(o, m, params, training=False).features, 1.7))

        named = {"obs": obs_feats, "mem": mem_feats}
        named.update({n: p for n, p in T.named_tensors(params, "gru")
                      if n.endswith(("kernel", "bias")) or ".b" in n})
        check_gradients(loss_fn, named, tol=1e-4)

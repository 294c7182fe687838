"""Built-in oracle and gradient suites behind the `check` subcommand.

Each check returns silently or raises AssertionError; `run_all` collects
(name, ok, detail) rows. The same properties are exercised in the pytest
suite; this module keeps a curated, dependency-free subset runnable from an
installed package.
"""

from __future__ import annotations

import itertools
import time

import numpy as np

from . import tensor as T
from .gradcheck import check_gradients, check_gradients_sampled, relative_error
from .losses import LossConfig, lovasz_softmax, one_hot, smoothness_reg, weighted_ce, total_loss
from .network import (NetworkConfig, StreamState, decode, encode, init_params,
                      update_memory)
from .padding import PaddingParams, adaptive_pad
from .pose import PoseSE3, align_memory
from .sparseconv import GruParams, SparseConvLayer, gru_update, sparse_conv, sparse_transpose_conv
from .voxel import PointCloudFrame, SparseVoxelGrid, knn, pack_keys, voxelize

__all__ = ["run_all", "CHECKS"]


def _rng(seed):
    return np.random.default_rng(seed)


def _jitter_biases(params, seed=3, scale=0.2):
    rng = _rng(seed)
    for _, p in T.named_tensors(params):
        if p.data.ndim == 1:
            p.data = p.data + rng.uniform(-scale, scale, size=p.data.shape)


def check_primitive_gradients():
    rng = _rng(0)
    x = T.parameter(rng.normal(size=(6, 4)), dtype=np.float64)
    w = T.parameter(rng.normal(size=(4, 3)), dtype=np.float64)
    b = T.parameter(rng.normal(size=3), dtype=np.float64)

    def loss():
        h = T.leaky_relu(T.linear(x, w, b))
        s = T.softmax_rows(h)
        l = T.log_softmax(T.mul(h, 0.7))
        seg = T.segment_mean(T.mul(s, l), np.array([0, 0, 1, 2, 2, 1]), 3)
        g = T.gather_rows(seg, np.array([2, 0, 1, 1]))
        return T.sum_all(T.mul(T.sigmoid(g), T.tanh(g)))

    check_gradients(loss, {"x": x, "w": w, "b": b})


def check_voxelize_oracle():
    rng = _rng(1)
    pos = rng.uniform(-8, 8, size=(1000, 3))
    feats = rng.normal(size=(1000, 4)).astype(np.float32)
    grid, p2v = voxelize(feats, pos, 0.5)
    groups = {}
    for i, p in enumerate(pos):
        groups.setdefault(tuple(int(np.floor(c / 0.5)) for c in p), []).append(i)
    keys = sorted(groups)
    assert [tuple(c) for c in grid.coords] == keys
    for row, key in enumerate(keys):
        acc = np.zeros(4, dtype=np.float32)
        for i in groups[key]:
            acc = acc + feats[i]
        expected = acc / np.float32(len(groups[key]))
        assert np.array_equal(grid.features.data[row], expected)


def check_knn_oracle():
    rng = _rng(2)
    pos = rng.uniform(-10, 10, size=(500, 3))
    grid, _ = voxelize(np.ones((500, 1)), pos, 0.4)
    queries = rng.uniform(-10, 10, size=(200, 3))
    res = knn(queries, grid, k=5)
    centers = grid.centers()
    for qi, q in enumerate(queries):
        d2 = ((centers - q) ** 2).sum(axis=1)
        order = sorted(range(len(centers)), key=lambda i: (d2[i], i))[:5]
        assert list(res.indices[qi]) == order


def check_sparse_conv_dense_oracle():
    rng = _rng(3)
    coords = np.array(list(itertools.product(range(4), repeat=3)), dtype=np.int32)
    order = np.argsort(pack_keys(coords))
    grid = SparseVoxelGrid(0.5, coords[order], rng.normal(size=(64, 2)))
    layer = SparseConvLayer.create(rng, 3, 2, 3, dtype=np.float64)
    out = sparse_conv(grid, layer)
    vol = np.zeros((4, 4, 4, 2))
    for c, f in zip(grid.coords, grid.features.data):
        vol[tuple(c)] = f
    for c, f in zip(out.coords, out.features.data):
        acc = layer.bias.data.copy()
        for d in itertools.product((-1, 0, 1), repeat=3):
            q = c + np.array(d)
            if ((q >= 0) & (q < 4)).all():
                acc = acc + vol[tuple(q)] @ layer.kernel.data[d[0] + 1, d[1] + 1, d[2] + 1]
        assert np.abs(f - acc).max() < 1e-5


def check_transpose_adjoint():
    rng = _rng(4)
    coords = np.unique(rng.integers(-3, 4, size=(40, 3)), axis=0).astype(np.int32)
    order = np.argsort(pack_keys(coords))
    x = rng.normal(size=(len(coords), 3))
    grid = SparseVoxelGrid(0.5, coords[order], x[order])
    w = rng.normal(size=(2, 2, 2, 3, 5))
    down = SparseConvLayer(T.constant(w), T.constant(np.zeros(5)), stride=2)
    up = SparseConvLayer(T.constant(np.ascontiguousarray(w.swapaxes(3, 4))),
                         T.constant(np.zeros(3)), stride=2, transposed=True)
    y = sparse_conv(grid, down)
    v = rng.normal(size=y.features.data.shape)
    u = sparse_transpose_conv(SparseVoxelGrid(y.voxel_size, y.coords, v, keys=y.keys),
                              up, grid.coords)
    lhs = float((y.features.data * v).sum())
    rhs = float((grid.features.data * u.features.data).sum())
    assert abs(lhs - rhs) < 1e-5 * max(1.0, abs(lhs))


def check_alignment_identities():
    rng = _rng(5)
    grid, _ = voxelize(rng.normal(size=(200, 8)).astype(np.float32),
                       rng.uniform(-6, 6, (200, 3)), 0.5)
    out = align_memory(grid, PoseSE3.identity())
    assert np.array_equal(out.coords, grid.coords)
    assert np.array_equal(out.features.data, grid.features.data)
    shifted = align_memory(grid, PoseSE3(np.eye(3), [0.5, 0.0, 0.0]))
    assert {tuple(c) for c in shifted.coords} \
        == {(c[0] + 1, c[1], c[2]) for c in grid.coords}


def check_padding_weights_and_gradients():
    rng = _rng(6)
    mem, _ = voxelize(rng.normal(size=(40, 2)), rng.uniform(-4, 4, (40, 3)), 0.5)
    obs, _ = voxelize(rng.normal(size=(40, 2)), rng.uniform(-4, 4, (40, 3)), 0.5)
    params = PaddingParams.create(_rng(7), k=3, hidden=3, dtype=np.float64)
    pair = adaptive_pad(mem, obs, params)
    assert pair.memory.n_voxels == pair.observation.n_voxels
    from .padding import pad_weights
    queries = rng.uniform(-4, 4, (20, 3))
    nb = knn(queries, mem, k=3)
    w = pad_weights(queries, T.constant(rng.normal(size=(20, 2))), mem, nb,
                    params.into_memory)
    assert np.abs(w.data.sum(axis=1) - 1.0).max() < 1e-6

    mem_feats = T.parameter(mem.features.data.copy(), dtype=np.float64)
    obs_feats = T.parameter(obs.features.data.copy(), dtype=np.float64)

    def loss():
        m = SparseVoxelGrid(0.5, mem.coords, mem_feats, keys=mem.keys)
        o = SparseVoxelGrid(0.5, obs.coords, obs_feats, keys=obs.keys)
        p = adaptive_pad(m, o, params)
        return T.sum_all(T.mul(p.memory.features, p.observation.features))

    named = {"m": mem_feats, "o": obs_feats}
    named.update(dict(T.named_tensors(params, "pad")))
    check_gradients(loss, named)


def check_gru_identities_and_gradients():
    rng = _rng(8)
    coords = np.unique(rng.integers(-2, 3, size=(20, 3)), axis=0).astype(np.int32)
    coords = coords[np.argsort(pack_keys(coords))]
    obs = SparseVoxelGrid(0.5, coords, rng.normal(size=(len(coords), 2)))
    mem = SparseVoxelGrid(0.5, coords, rng.normal(size=(len(coords), 2)))
    params = GruParams.create(_rng(9), 2, dtype=np.float64)
    params.update_gate.conv_out.bias.data = np.full(2, -50.0)
    params.update_gate.conv_out.kernel.data = np.zeros_like(
        params.update_gate.conv_out.kernel.data)
    out = gru_update(obs, mem, params)
    assert np.abs(out.features.data - mem.features.data).max() < 1e-4

    params = GruParams.create(_rng(10), 2, dtype=np.float64)
    _jitter_biases(params, seed=5)
    obs_feats = T.parameter(obs.features.data.copy(), dtype=np.float64)
    mem_feats = T.parameter(mem.features.data.copy(), dtype=np.float64)

    def loss():
        o = SparseVoxelGrid(0.5, coords, obs_feats)
        m = SparseVoxelGrid(0.5, coords, mem_feats)
        return T.sum_all(gru_update(o, m, params).features)

    named = {"o": obs_feats, "m": mem_feats}
    named.update(dict(T.named_tensors(params, "gru")))
    check_gradients_sampled(loss, named, n_per_param=2)


def check_loss_oracles():
    rng = _rng(11)
    labels = rng.integers(0, 3, 12)
    logits = rng.normal(size=(12, 3))
    config = LossConfig(class_weights=rng.uniform(0.5, 2.0, 3))
    got = weighted_ce(T.constant(logits), labels, config).data
    expected = 0.0
    for i in range(12):
        p = np.exp(logits[i] - logits[i].max())
        p /= p.sum()
        expected += -config.class_weights[labels[i]] * np.log(p[labels[i]])
    assert abs(got - expected / 12) < 1e-6

    # lovasz against the extension definition
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    got = lovasz_softmax(T.constant(probs), labels, LossConfig.uniform(3)).data

    def delta(fg, subset):
        union = fg | subset
        return 1.0 - len(fg - subset) / len(union) if union else 0.0

    per_class = []
    for c in np.unique(labels):
        fg = {i for i in range(12) if labels[i] == c}
        errors = [1 - probs[i, c] if i in fg else probs[i, c] for i in range(12)]
        order = sorted(range(12), key=lambda i: (-errors[i], i))
        total, prev, prefix = 0.0, 0.0, set()
        for i in order:
            prefix = prefix | {i}
            cur = delta(fg, prefix)
            total += errors[i] * (cur - prev)
            prev = cur
        per_class.append(total)
    assert abs(got - np.mean(per_class)) < 1e-9

    # smoothness identities
    pts = rng.normal(size=(12, 3))
    nb = knn(pts, pts, k=4, exclude_self=True)
    cfg = LossConfig.uniform(3)
    zero = smoothness_reg(T.constant(one_hot(labels, 3)), labels, nb, cfg).data
    assert zero == 0.0

    lg = T.parameter(rng.normal(size=(12, 3)), dtype=np.float64)
    check_gradients(lambda: total_loss(lg, None, labels, None, cfg, neighbors=nb),
                    {"logits": lg})


def check_full_bptt_gradients():
    config = NetworkConfig.micro()
    params = init_params(config, seed=13)
    _jitter_biases(params, seed=3)
    loss_config = LossConfig.uniform(config.num_classes)
    rng = _rng(14)
    frames, neighborhoods = [], []
    for i in range(3):
        coords = rng.uniform(-1.5, 1.5, size=(13, 3)) + np.array([0.4 * i, 0, 0])
        f = PointCloudFrame(coords, rng.uniform(0, 1, 13),
                            labels=rng.integers(0, 3, 13), frame_index=i)
        frames.append(f)
        neighborhoods.append(knn(f.coords, f.coords, k=6, exclude_self=True))
    pose = PoseSE3(np.eye(3), [0.4, 0.0, 0.0])

    def loss():
        state = StreamState()
        total = T.constant(np.zeros(()))
        for f, nb in zip(frames, neighborhoods):
            enc = encode(f, params, config, training=True)
            state = update_memory(state, enc.coarse, pose, params, config,
                                  training=True)
            sem, _ = decode(state.memory, enc.point_embeddings, f, params,
                            config, training=True)
            total = T.add(total, total_loss(sem, None, f.labels, None,
                                            loss_config, neighbors=nb))
        return T.mul(total, 1.0 / 3.0)

    named = dict(T.named_tensors(params))
    check_gradients_sampled(loss, named, n_per_param=2, seed=15)


def check_determinism():
    def run():
        rng = _rng(16)
        config = NetworkConfig.micro()
        params = init_params(config, seed=17)
        f = PointCloudFrame(rng.uniform(-2, 2, (25, 3)), rng.uniform(0, 1, 25),
                            labels=rng.integers(0, 3, 25))
        from .network import step
        res = step(StreamState(), f, PoseSE3.identity(), params, config)
        return res.scores.tobytes()

    assert run() == run()


CHECKS = [
    ("primitive-gradients", check_primitive_gradients),
    ("voxelize-group-average-oracle", check_voxelize_oracle),
    ("knn-exhaustive-oracle", check_knn_oracle),
    ("sparse-conv-dense-oracle", check_sparse_conv_dense_oracle),
    ("transpose-conv-adjoint", check_transpose_adjoint),
    ("alignment-identities", check_alignment_identities),
    ("padding-weights-and-gradients", check_padding_weights_and_gradients),
    ("gru-identities-and-gradients", check_gru_identities_and_gradients),
    ("loss-oracles-and-gradients", check_loss_oracles),
    ("full-bptt-window-gradients", check_full_bptt_gradients),
    ("inference-determinism", check_determinism),
]


def run_all(verbose: bool = True):
    """Run every suite; returns [(name, ok, detail)]."""
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
            ok, detail = True, f"{time.perf_counter() - t0:.1f}s"
        except Exception as exc:  # noqa: BLE001 - report, do not crash the runner
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name} ({detail})")
    return results

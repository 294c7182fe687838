"""Acceptance criteria, one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. Criterion 5 trains the full
desk benchmark (the shipped configs/benchmark.cfg) and takes the bulk of the
runtime; everything else finishes in a few minutes.
"""

import itertools
import json
import os
import time

import numpy as np
import pytest

from mvxseg import tensor as T
from mvxseg import selfcheck
from mvxseg.cli import build_dataset, loss_config, main, network_config, train_config
from mvxseg.evaluate import confusion_matrix, evaluate, iou_from_confusion, tta_evaluate
from mvxseg.fileio import parse_config
from mvxseg.gradcheck import check_gradients
from mvxseg.losses import LossConfig, lovasz_softmax, one_hot, smoothness_reg
from mvxseg.network import NetworkConfig, init_params
from mvxseg.padding import PadMlp, PaddingParams, pad_weights
from mvxseg.pose import PoseSE3, align_memory
from mvxseg.sparseconv import GruParams, gru_update
from mvxseg.train import train
from mvxseg.voxel import SparseVoxelGrid, knn, pack_keys, voxelize

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")

# Desk-scale expectation for the memory-vs-baseline gap on recently occluded
# objects, fixed after the seeded pilot run; the sign of the gap is the claim
# under test, the 5-point margin is the accepted threshold.
OCCLUSION_GAP_POINTS = 5.0


def _report(criterion: str, detail: str):
    print(f"\n[ACCEPT] {criterion}: PASS ({detail})")


def _rng(seed=0):
    return np.random.default_rng(seed)


# -------------------------------------------------------------- criterion 1

def test_c1_gradient_suite_under_five_minutes():
    t0 = time.perf_counter()
    selfcheck.check_primitive_gradients()
    selfcheck.check_padding_weights_and_gradients()   # padding chain end to end
    selfcheck.check_gru_identities_and_gradients()    # gated refinement
    selfcheck.check_loss_oracles()                    # CE + Lovasz + smoothness
    selfcheck.check_full_bptt_gradients()             # 3-frame window, <= 40 pts
    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0, f"gradient suite took {elapsed:.0f}s"
    _report("criterion-1 gradient suite",
            f"all finite-difference checks at rel err < 1e-4 in {elapsed:.0f}s")


# -------------------------------------------------------------- criterion 2

def test_c2_oracle_suite():
    selfcheck.check_voxelize_oracle()          # bit-identical group averages
    selfcheck.check_knn_oracle()               # identical index sets
    selfcheck.check_sparse_conv_dense_oracle()  # dense conv on the full cube
    selfcheck.check_transpose_adjoint()        # <conv x, y> == <x, conv^T y>

    # Lovasz vs the extension definition on <= 6-point instances at 1e-9
    rng = _rng(10)
    config = LossConfig.uniform(2)
    for labels in itertools.product([0, 1], repeat=5):
        labels = np.array(labels)
        p1 = rng.uniform(0.02, 0.98, 5)
        probs = np.stack([1 - p1, p1], axis=1)
        got = float(lovasz_softmax(T.constant(probs), labels, config).data)
        expected = []
        for c in np.unique(labels):
            fg = {i for i in range(5) if labels[i] == c}
            errors = [1 - probs[i, c] if i in fg else probs[i, c] for i in range(5)]
            order = sorted(range(5), key=lambda i: (-errors[i], i))
            total, prev, prefix = 0.0, 0.0, set()
            for i in order:
                prefix = prefix | {i}
                union = fg | prefix
                cur = 1.0 - len(fg - prefix) / len(union) if union else 0.0
                total += errors[i] * (cur - prev)
                prev = cur
            expected.append(total)
        assert abs(got - float(np.mean(expected))) < 1e-9

    # confusion / mIoU versus a per-point counting oracle, exact
    rng = _rng(11)
    labels = rng.integers(0, 4, 1000)
    preds = rng.integers(0, 4, 1000)
    conf = confusion_matrix(preds, labels, 4)
    oracle = np.zeros((4, 4), dtype=np.int64)
    for p, y in zip(preds, labels):
        oracle[y, p] += 1
    assert np.array_equal(conf, oracle)
    iou, miou, _ = iou_from_confusion(conf)
    per_class = []
    for c in range(4):
        inter = int(((preds == c) & (labels == c)).sum())
        union = int(((preds == c) | (labels == c)).sum())
        per_class.append(inter / union)
    assert np.allclose(iou, per_class) and abs(miou - np.mean(per_class)) < 1e-12
    _report("criterion-2 oracle suite",
            "voxelize bit-identical, knn/conf exact, conv/adjoint 1e-5, lovasz 1e-9")


# -------------------------------------------------------------- criterion 3

def test_c3_equation_invariants():
    rng = _rng(12)
    # padding weights sum to 1 within 1e-6
    src, _ = voxelize(rng.normal(size=(60, 3)), rng.uniform(-4, 4, (60, 3)), 0.5)
    queries = rng.uniform(-4, 4, (50, 3))
    nb = knn(queries, src, k=5)
    w = pad_weights(queries, T.constant(rng.normal(size=(50, 3))), src, nb,
                    PadMlp.create(_rng(13), dtype=np.float64))
    assert np.abs(w.data.sum(axis=1) - 1.0).max() < 1e-6

    # forced z = 0 returns the previous memory within 1e-4
    coords = np.unique(rng.integers(-2, 3, size=(25, 3)), axis=0).astype(np.int32)
    coords = coords[np.argsort(pack_keys(coords))]
    obs = SparseVoxelGrid(0.5, coords, rng.normal(size=(len(coords), 3)))
    mem = SparseVoxelGrid(0.5, coords, rng.normal(size=(len(coords), 3)))
    params = GruParams.create(_rng(14), 3, dtype=np.float64)
    params.update_gate.conv_out.kernel.data = np.zeros_like(
        params.update_gate.conv_out.kernel.data)
    params.update_gate.conv_out.bias.data = np.full(3, -50.0)
    out = gru_update(obs, mem, params)
    assert np.abs(out.features.data - mem.features.data).max() < 1e-4

    # alignment identities
    grid, _ = voxelize(rng.normal(size=(150, 4)).astype(np.float32),
                       rng.uniform(-5, 5, (150, 3)), 0.5)
    ident = align_memory(grid, PoseSE3.identity())
    assert np.array_equal(ident.coords, grid.coords)
    assert np.array_equal(ident.features.data, grid.features.data)
    shifted = align_memory(grid, PoseSE3(np.eye(3), [0.5, 0.0, 0.0]))
    assert {tuple(c) for c in shifted.coords} \
        == {(c[0] + 1, c[1], c[2]) for c in grid.coords}
    _report("criterion-3 equation invariants",
            "weight normalization, z=0 pass-through, alignment identity/shift")


# -------------------------------------------------------------- criterion 4

def test_c4_regularizer_properties():
    rng = _rng(15)
    pts = rng.normal(size=(10, 3))
    labels = rng.integers(0, 3, 10)
    nb = knn(pts, pts, k=4, exclude_self=True)
    config = LossConfig.uniform(3)
    y = one_hot(labels, 3)
    assert smoothness_reg(T.constant(y), labels, nb, config).data == 0.0

    const_pred = np.tile(np.array([[0.5, 0.25, 0.25]]), (10, 1))
    const_labels = np.full(10, 1)
    assert smoothness_reg(T.constant(const_pred), const_labels, nb, config).data == 0.0

    # symmetry under swapping the two fields
    from mvxseg.losses import _variation
    probs = rng.dirichlet(np.ones(3), size=10)
    a = smoothness_reg(T.constant(probs), labels, nb, config).data
    swapped = T.mul(T.sum_all(T.sum_axis(T.absolute(T.sub(
        _variation(T.constant(probs), nb), _variation(T.constant(y), nb))), 1)),
        1.0 / 10)
    assert abs(float(a) - float(swapped.data)) < 1e-15

    # the 4-point hand oracle
    pts4 = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    labels4 = np.array([0, 0, 1, 1])
    probs4 = np.array([[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.2, 0.8]])
    nb4 = knn(pts4, pts4, k=2, exclude_self=True)
    got = smoothness_reg(T.constant(probs4), labels4, nb4,
                         LossConfig.uniform(2)).data
    y4 = one_hot(labels4, 2)
    total = 0.0
    for i in range(4):
        vy = np.mean([np.abs(y4[i] - y4[j]) for j in nb4.indices[i]], axis=0)
        vp = np.mean([np.abs(probs4[i] - probs4[j]) for j in nb4.indices[i]], axis=0)
        total += np.abs(vy - vp).sum()
    assert abs(float(got) - total / 4.0) < 1e-6
    _report("criterion-4 regularizer properties",
            "zeros at perfect/constant fields, symmetric, 4-point oracle 1e-6")


# -------------------------------------------------------------- criterion 5

@pytest.fixture(scope="session")
def benchmark_run():
    rc = parse_config(open(os.path.join(CONFIG_DIR, "benchmark.cfg")).read())
    dataset = build_dataset(rc)
    net = network_config(rc)
    t0 = time.perf_counter()
    result = train(dataset, net, train_config(rc), loss_config(rc, dataset))
    train_seconds = time.perf_counter() - t0
    memory_report = evaluate(result.params, net, dataset, mode="memory")
    sfb_report = evaluate(result.sfb_params, net, dataset, mode="sfb")
    return rc, net, dataset, result, train_seconds, memory_report, sfb_report


def test_c5_desk_benchmark_memory_beats_baseline(benchmark_run):
    rc, net, dataset, result, train_seconds, mem_rep, sfb_rep = benchmark_run
    points = np.mean([f.n_points for s in dataset for f in s.frames])
    assert len(dataset) == 3 and all(s.n_frames == 30 for s in dataset)
    assert 3500 <= points <= 7000, f"~5k points/frame expected, got {points:.0f}"
    assert train_seconds < 1200.0, f"two-phase training took {train_seconds:.0f}s"

    assert mem_rep.occlusion_points > 0
    gap = 100.0 * (mem_rep.occlusion_miou - sfb_rep.occlusion_miou)
    assert gap >= OCCLUSION_GAP_POINTS, \
        f"occlusion-recovery gap {gap:.1f} mIoU points < {OCCLUSION_GAP_POINTS}"

    for b, (m, s) in enumerate(zip(mem_rep.range_binned_miou,
                                   sfb_rep.range_binned_miou)):
        if np.isnan(m) and np.isnan(s):
            continue
        assert m >= s - 1e-9, f"range bin {b}: memory {m:.3f} < baseline {s:.3f}"
    assert mem_rep.miou >= sfb_rep.miou - 1e-9
    _report("criterion-5 desk benchmark",
            f"train {train_seconds:.0f}s; occlusion gap +{gap:.1f} pts "
            f"({mem_rep.occlusion_miou:.3f} vs {sfb_rep.occlusion_miou:.3f}); "
            f"bins memory {[round(v, 3) for v in mem_rep.range_binned_miou[:3]]} "
            f"vs sfb {[round(v, 3) for v in sfb_rep.range_binned_miou[:3]]}")


# -------------------------------------------------------------- criterion 6

def test_c6_test_time_augmentation(benchmark_run):
    rc, net, dataset, result, _, mem_rep, _ = benchmark_run
    small = [dataset[0]]
    plain = evaluate(result.params, net, small, mode="memory")
    single = tta_evaluate(result.params, net, small, passes=1, seed=3)
    assert np.array_equal(plain.confusion, single.confusion), \
        "1-pass identity TTA must equal plain evaluation bit-exactly"

    collected = {}
    averaged = tta_evaluate(result.params, net, small, passes=10, seed=3)
    assert np.isfinite(averaged.miou)
    delta = abs(averaged.miou - plain.miou)
    assert delta < 1.0

    # averaged scores stay normalized within 1e-6
    def probe(s, t, scores):
        collected[(s, t)] = scores
        return scores

    evaluate(result.params, net, small, mode="memory", score_hook=probe)
    for scores in collected.values():
        assert np.abs(scores.sum(axis=1) - 1.0).max() < 1e-6
    _report("criterion-6 TTA",
            f"identity pass bit-exact; 10-pass mIoU delta {delta:.4f}; "
            "scores normalized within 1e-6")


# -------------------------------------------------------------- criterion 7

def test_c7_cli_determinism(tmp_path):
    from mvxseg.fileio import RunConfig, serialize_config
    rc = RunConfig(v_b=0.2, d_m=8, stage_widths=(4, 4, 8, 8, 8),
                   decoder_width=4, padding_k=3, padding_hidden=4,
                   sequences=1, frames=8, rays_azimuth=70, rays_elevation=9,
                   phase1_epochs=1, phase2_epochs=1, warmup_frames=2,
                   bptt_frames=2, cutmix_count=2, reg_neighbors=8,
                   beta_reg=1.0, data_dir=str(tmp_path / "data"),
                   out_dir=str(tmp_path / "o1"))
    cfg1 = tmp_path / "r1.cfg"
    cfg1.write_text(serialize_config(rc))
    rc.out_dir = str(tmp_path / "o2")
    cfg2 = tmp_path / "r2.cfg"
    cfg2.write_text(serialize_config(rc))

    assert main(["generate", "--config", str(cfg1)]) == 0
    for cfg in (cfg1, cfg2):
        assert main(["train", "--config", str(cfg)]) == 0
        out = parse_config(open(cfg).read()).out_dir
        assert main(["eval", "--config", str(cfg),
                     "--checkpoint", os.path.join(out, "checkpoint.mvxp"),
                     "--out", os.path.join(out, "metrics.json")]) == 0

    t1 = open(tmp_path / "o1" / "train_metrics.json", "rb").read()
    t2 = open(tmp_path / "o2" / "train_metrics.json", "rb").read()
    # the config echo embeds out_dir; compare the loss payloads
    d1, d2 = json.loads(t1), json.loads(t2)
    assert d1["phase1_losses"] == d2["phase1_losses"]
    assert d1["phase2_losses"] == d2["phase2_losses"]
    m1 = json.loads(open(tmp_path / "o1" / "metrics.json").read())["report"]
    m2 = json.loads(open(tmp_path / "o2" / "metrics.json").read())["report"]
    assert json.dumps(m1, sort_keys=True).encode() \
        == json.dumps(m2, sort_keys=True).encode()
    _report("criterion-7 determinism",
            "train + eval twice: identical losses, byte-identical metric reports")


# -------------------------------------------------------------- criterion 8

def test_c8_throughput_smoke(capsys):
    t0 = time.perf_counter()
    assert main(["bench", "--frames", "50"]) == 0
    elapsed = time.perf_counter() - t0
    payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert payload["frames"] == 50
    assert payload["mean_points"] >= 20000, \
        f"bench scene must average >= 20k points, got {payload['mean_points']}"
    assert payload["step_total_s"] < 60.0, \
        f"50 full steps took {payload['step_total_s']}s"
    _report("criterion-8 throughput",
            f"50 frames x {payload['mean_points']} pts in "
            f"{payload['step_total_s']}s (whole bench {elapsed:.0f}s)")

"""Command-line surface: generate / train / eval / infer / check / bench.

Errors exit with machine-parsable one-liners: bad config keys exit 2, missing
files exit 3, anything else 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import tensor as T
from .evaluate import evaluate, tta_evaluate
from .fileio import (ConfigError, RunConfig, load_params_into, parse_config,
                     read_checkpoint, read_frame, read_poses, serialize_config,
                     write_checkpoint, write_frame, write_memory_snapshot,
                     write_metrics_json, write_poses, export_ply,
                     class_palette, pca_colors)
from .losses import LossConfig, class_weights_from_counts
from .network import NetworkConfig, StreamState, init_params, step
from .pose import PoseSE3, compose, invert
from .scene import SequenceData, SyntheticSceneSpec, BoxSpec, \
    benchmark_scene_specs, generate_sequence
from .train import TrainConfig, train
from .voxel import knn, voxelize

__all__ = ["main", "network_config", "train_config", "loss_config",
           "build_dataset", "load_dataset"]


def network_config(rc: RunConfig) -> NetworkConfig:
    return NetworkConfig(
        v_b=rc.v_b, v_m=rc.v_m, d_m=rc.d_m, num_classes=rc.num_classes,
        movable_classes=tuple(rc.movable_classes),
        stage_widths=tuple(rc.stage_widths), decoder_width=rc.decoder_width,
        padding_k=rc.padding_k, padding_hidden=rc.padding_hidden,
        width_scale=rc.width_scale,
        memory_crop_radius=rc.memory_crop_radius or None,
        padding_mode=rc.padding_mode, gru_mode=rc.gru_mode)


def train_config(rc: RunConfig) -> TrainConfig:
    return TrainConfig(
        phase1_epochs=rc.phase1_epochs, phase2_epochs=rc.phase2_epochs,
        warmup_frames=rc.warmup_frames, bptt_frames=rc.bptt_frames,
        lr=rc.lr, lr_decay=rc.lr_decay, weight_decay=rc.weight_decay,
        grad_clip=rc.grad_clip, cutmix_count=rc.cutmix_count,
        augment=rc.augment, seed=rc.seed)


def loss_config(rc: RunConfig, dataset=None) -> LossConfig:
    if dataset:
        counts = np.zeros(rc.num_classes)
        for seq in dataset:
            for frame in seq.frames:
                counts += np.bincount(frame.labels, minlength=rc.num_classes)
        weights = class_weights_from_counts(
            counts, clamp=(rc.weight_clamp_lo, rc.weight_clamp_hi))
    else:
        weights = np.ones(rc.num_classes)
    return LossConfig(class_weights=weights, beta_wce=rc.beta_wce,
                      beta_ls=rc.beta_ls, beta_reg=rc.beta_reg,
                      reg_neighbors=rc.reg_neighbors)


def build_dataset(rc: RunConfig):
    """Seeded synthetic benchmark sequences from the [data] section."""
    specs = benchmark_scene_specs(
        n_sequences=rc.sequences, n_frames=rc.frames, seed=rc.seed,
        rays=(rc.rays_azimuth, rc.rays_elevation), noise_sigma=rc.noise_sigma)
    return [generate_sequence(s) for s in specs]


def save_dataset(dataset, out_dir) -> None:
    for s, seq in enumerate(dataset):
        seq_dir = os.path.join(out_dir, f"seq_{s:03d}")
        os.makedirs(seq_dir, exist_ok=True)
        for t, frame in enumerate(seq.frames):
            write_frame(frame, os.path.join(seq_dir, f"frame_{t:04d}.mvxf"))
        write_poses(seq.ego_poses, os.path.join(seq_dir, "poses.txt"))
        np.savez(os.path.join(seq_dir, "meta.npz"),
                 visibility=seq.visibility,
                 object_classes=seq.object_classes,
                 **{f"object_ids_{t:04d}": ids
                    for t, ids in enumerate(seq.object_ids)})


def load_dataset(data_dir):
    """Rebuild sequences from frame/pose files (+ per-object sidecar if present)."""
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    dataset = []
    for name in sorted(os.listdir(data_dir)):
        seq_dir = os.path.join(data_dir, name)
        if not os.path.isdir(seq_dir):
            continue
        frame_files = sorted(f for f in os.listdir(seq_dir) if f.endswith(".mvxf"))
        frames = [read_frame(os.path.join(seq_dir, f), frame_index=t)
                  for t, f in enumerate(frame_files)]
        ego = read_poses(os.path.join(seq_dir, "poses.txt"))
        rel = [PoseSE3.identity()]
        rel += [compose(invert(ego[t]), ego[t - 1]) for t in range(1, len(ego))]
        meta_path = os.path.join(seq_dir, "meta.npz")
        if os.path.exists(meta_path):
            meta = np.load(meta_path)
            visibility = meta["visibility"]
            object_classes = meta["object_classes"]
            object_ids = [meta[f"object_ids_{t:04d}"] for t in range(len(frames))]
        else:
            visibility = np.zeros((len(frames), 0), dtype=np.int64)
            object_classes = np.zeros(0, dtype=np.int64)
            object_ids = [np.full(f.n_points, -1, dtype=np.int64) for f in frames]
        dataset.append(SequenceData(frames=frames, relative_poses=rel,
                                    ego_poses=ego, object_ids=object_ids,
                                    visibility=visibility,
                                    object_classes=object_classes))
    if not dataset:
        raise FileNotFoundError(f"no sequences under {data_dir}")
    return dataset


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(open(path).read())


def _range_bins(arg: str | None):
    if not arg:
        return (10.0, 20.0, 30.0, np.inf)
    edges = [float(v) for v in arg.split(",") if v.strip()]
    return tuple(edges) + (np.inf,)


def _load_checkpoint_into(params, path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    load_params_into(params, read_checkpoint(path))


def cmd_generate(args) -> int:
    rc = _load_config(args.config)
    dataset = build_dataset(rc)
    out = args.out or rc.data_dir
    os.makedirs(out, exist_ok=True)
    save_dataset(dataset, out)
    with open(os.path.join(out, "config.echo.cfg"), "w") as fh:
        fh.write(serialize_config(rc))
    print(json.dumps({"sequences": len(dataset),
                      "frames": sum(s.n_frames for s in dataset),
                      "points": int(sum(f.n_points for s in dataset
                                        for f in s.frames)),
                      "out": out}, sort_keys=True))
    return 0


def _dataset_for(rc: RunConfig, data_dir):
    if data_dir and os.path.isdir(data_dir):
        return load_dataset(data_dir)
    return build_dataset(rc)


def cmd_train(args) -> int:
    rc = _load_config(args.config)
    dataset = _dataset_for(rc, args.data or rc.data_dir)
    net = network_config(rc)
    result = train(dataset, net, train_config(rc), loss_config(rc, dataset))
    out = args.out or rc.out_dir
    os.makedirs(out, exist_ok=True)
    write_checkpoint(list(T.named_state(result.params)),
                     os.path.join(out, "checkpoint.mvxp"))
    write_checkpoint(list(T.named_state(result.sfb_params)),
                     os.path.join(out, "checkpoint_sfb.mvxp"))
    write_metrics_json({
        "config": serialize_config(rc),
        "phase1_losses": [round(v, 8) for v in result.phase1_losses],
        "phase2_losses": [round(v, 8) for v in result.phase2_losses],
    }, os.path.join(out, "train_metrics.json"))
    with open(os.path.join(out, "train_timing.json"), "w") as fh:
        json.dump({"wall_seconds": result.wall_seconds}, fh)
    print(json.dumps({"out": out,
                      "phase1_final_loss": round(result.phase1_losses[-1], 6)
                      if result.phase1_losses else None,
                      "phase2_final_loss": round(result.phase2_losses[-1], 6)
                      if result.phase2_losses else None}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    rc = _load_config(args.config)
    dataset = _dataset_for(rc, args.data or rc.data_dir)
    net = network_config(rc)
    params = init_params(net, seed=rc.seed)
    if args.checkpoint or rc.checkpoint:
        _load_checkpoint_into(params, args.checkpoint or rc.checkpoint)
    mode = "sfb" if args.sfb else "memory"
    bins = _range_bins(args.range_bins)
    if args.tta:
        report = tta_evaluate(params, net, dataset, passes=args.tta_passes,
                              seed=rc.seed, mode=mode, range_bins=bins)
    else:
        report = evaluate(params, net, dataset, mode=mode, range_bins=bins)
    payload = {"config": serialize_config(rc), "report": report.to_dict()}
    out = args.out or os.path.join(rc.out_dir, f"metrics_{mode}.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    write_metrics_json(payload, out)
    timing_path = out.replace(".json", "") + ".timing.json"
    with open(timing_path, "w") as fh:
        json.dump({"per_frame_ms": report.per_frame_ms}, fh)
    print(json.dumps({"miou": report.to_dict()["miou"], "mode": mode,
                      "out": out}, sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    rc = _load_config(args.config)
    dataset = _dataset_for(rc, args.data or rc.data_dir)
    if not 0 <= args.sequence < len(dataset):
        raise FileNotFoundError(f"sequence index {args.sequence} out of range")
    seq = dataset[args.sequence]
    net = network_config(rc)
    params = init_params(net, seed=rc.seed)
    if args.checkpoint or rc.checkpoint:
        _load_checkpoint_into(params, args.checkpoint or rc.checkpoint)
    out = args.out or rc.out_dir
    os.makedirs(out, exist_ok=True)
    state = StreamState()
    preds = {}
    for t, frame in enumerate(seq.frames):
        res = step(state, frame, seq.relative_poses[t], params, net,
                   sfb=args.sfb)
        state = res.state
        preds[f"pred_{t:04d}"] = res.predictions.astype(np.uint16)
        preds[f"scores_{t:04d}"] = res.scores.astype(np.float32)
        if args.export_memory and state.memory is not None:
            write_memory_snapshot(state.memory,
                                  os.path.join(out, f"memory_{t:04d}.mvxm"),
                                  frame_index=t)
        if args.export_ply:
            palette = class_palette(net.num_final)
            export_ply(frame.coords, palette[res.predictions],
                       os.path.join(out, f"pred_{t:04d}.ply"))
            if args.export_memory and state.memory is not None:
                export_ply(state.memory.centers(),
                           pca_colors(state.memory.features.data),
                           os.path.join(out, f"memory_{t:04d}.ply"))
    np.savez(os.path.join(out, "predictions.npz"), **preds)
    print(json.dumps({"frames": seq.n_frames, "out": out}, sort_keys=True))
    return 0


def cmd_check(args) -> int:
    from .selfcheck import run_all
    results = run_all(verbose=True)
    ok = all(r[1] for r in results)
    print(json.dumps({"passed": sum(r[1] for r in results),
                      "failed": sum(not r[1] for r in results)}, sort_keys=True))
    return 0 if ok else 1


def cmd_bench(args) -> int:
    rng_spec = SyntheticSceneSpec(
        ground_extent=11.0, n_azimuth=430, n_elevation=70,
        elevation_range=(-0.55, 0.08), max_range=26.0,
        ego_start=(-3.0, 0.0, 0.0), ego_velocity=(0.12, 0.0, 0.0),
        boxes=[
            BoxSpec(center=(4.0, 3.0, 1.25), size=(8.0, 0.4, 2.5), cls=1),
            BoxSpec(center=(-4.0, -5.0, 1.25), size=(6.0, 0.4, 2.5), cls=1),
            BoxSpec(center=(2.0, -4.0, 0.75), size=(3.6, 1.8, 1.5), cls=2),
            BoxSpec(center=(-5.0, 5.0, 0.75), size=(3.6, 1.8, 1.5), cls=3,
                    moving=True, velocity=(0.25, 0.0, 0.0)),
        ],
        n_frames=args.frames, noise_sigma=0.02, seed=7)
    dataset = [generate_sequence(rng_spec)]
    seq = dataset[0]
    n_points = int(np.mean([f.n_points for f in seq.frames]))
    net = NetworkConfig(v_b=0.05, v_m=0.5)
    params = init_params(net, seed=0)

    frame0 = seq.frames[0]
    t0 = time.perf_counter()
    grid, _ = voxelize(np.ones((frame0.n_points, 1), dtype=np.float32),
                       frame0.coords, net.v_b)
    voxelize_ms = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    knn(frame0.coords[:2000], grid, k=5)
    knn_ms = (time.perf_counter() - t0) * 1e3
    from .sparseconv import SparseConvLayer, sparse_conv
    layer = SparseConvLayer.create(np.random.default_rng(0), 3, 1, 16)
    t0 = time.perf_counter()
    sparse_conv(grid, layer)
    conv_ms = (time.perf_counter() - t0) * 1e3

    state = StreamState()
    t0 = time.perf_counter()
    for t, frame in enumerate(seq.frames):
        state = step(state, frame, seq.relative_poses[t], params, net).state
    total_s = time.perf_counter() - t0
    print(json.dumps({
        "frames": seq.n_frames, "mean_points": n_points,
        "voxelize_ms": round(voxelize_ms, 1), "knn_ms": round(knn_ms, 1),
        "sparse_conv_ms": round(conv_ms, 1),
        "step_total_s": round(total_s, 2),
        "step_mean_ms": round(total_s / seq.n_frames * 1e3, 1),
        "memory_voxels": state.memory.n_voxels,
    }, sort_keys=True))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvxseg",
        description="Streaming LiDAR segmentation with a sparse 3D latent memory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset to frame/pose files")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="two-phase training")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="streaming evaluation")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--sfb", action="store_true",
                   help="single-frame baseline mode (memory path disabled)")
    p.add_argument("--tta", action="store_true", help="average augmented passes")
    p.add_argument("--tta-passes", type=int, default=10)
    p.add_argument("--range-bins", help="comma-separated bin edges in meters")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="stream one sequence, emit predictions")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--sequence", type=int, default=0)
    p.add_argument("--sfb", action="store_true")
    p.add_argument("--export-memory", action="store_true",
                   help="write one MVXM snapshot per frame")
    p.add_argument("--export-ply", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("check", help="run the oracle and gradient suites")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("bench", help="throughput smoke test")
    p.add_argument("--frames", type=int, default=50)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(json.dumps({"error": str(exc), "key": exc.key, "code": 2}),
              file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(json.dumps({"error": str(exc), "code": 3}), file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - one-line machine-parsable errors
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}", "code": 1}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

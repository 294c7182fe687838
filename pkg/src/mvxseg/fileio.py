"""Binary/text file formats and the flat key = value run configuration.

Formats (all little-endian):

MVXF frames   magic "MVXF", version u32, point count u32, then per point
              x, y, z, intensity as float32, label u16, moving u8.
MVXP weights  magic "MVXP", version u32, then per tensor: name length u32,
              name bytes (utf-8), rank u32, dims u32 each, float32 payload;
              read until EOF.
MVXM memory   magic "MVXM", version u32, frame index u32, voxel count u32,
              feature width u32, voxel size float32, then int32 coords
              (count x 3) and float32 features (count x width).
poses         one line per frame: 12 floats, row-major 3x4 [R|t].
CSV frames    header x,y,z,intensity,label,moving.
PLY           ASCII, per-vertex xyz + RGB.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .pose import PoseSE3
from .voxel import PointCloudFrame, SparseVoxelGrid

__all__ = [
    "write_frame", "read_frame", "write_frame_csv", "read_frame_csv",
    "write_poses", "read_poses",
    "write_checkpoint", "read_checkpoint",
    "write_memory_snapshot", "read_memory_snapshot",
    "export_ply", "class_palette", "pca_colors",
    "RunConfig", "parse_config", "serialize_config", "ConfigError",
    "write_metrics_json",
]

_FRAME_MAGIC = b"MVXF"
_CKPT_MAGIC = b"MVXP"
_MEM_MAGIC = b"MVXM"
_VERSION = 1


def write_frame(frame: PointCloudFrame, path) -> None:
    n = frame.n_points
    labels = frame.labels if frame.labels is not None else np.zeros(n, np.int64)
    moving = frame.moving_flags if frame.moving_flags is not None \
        else np.zeros(n, bool)
    with open(path, "wb") as fh:
        fh.write(_FRAME_MAGIC)
        fh.write(struct.pack("<II", _VERSION, n))
        rec = np.zeros(n, dtype=np.dtype([("x", "<f4"), ("y", "<f4"),
                                          ("z", "<f4"), ("i", "<f4"),
                                          ("label", "<u2"), ("moving", "u1")]))
        rec["x"], rec["y"], rec["z"] = frame.coords.T.astype(np.float32)
        rec["i"] = frame.intensity.astype(np.float32)
        rec["label"] = labels.astype(np.uint16)
        rec["moving"] = moving.astype(np.uint8)
        fh.write(rec.tobytes())


def read_frame(path, frame_index: int = 0) -> PointCloudFrame:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FRAME_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected MVXF")
        version, n = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported frame version {version}")
        rec = np.frombuffer(fh.read(), dtype=np.dtype(
            [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("i", "<f4"),
             ("label", "<u2"), ("moving", "u1")]), count=n)
    coords = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    return PointCloudFrame(coords, rec["i"].astype(np.float64),
                           labels=rec["label"].astype(np.int64),
                           moving_flags=rec["moving"].astype(bool),
                           frame_index=frame_index)


def write_frame_csv(frame: PointCloudFrame, path) -> None:
    labels = frame.labels if frame.labels is not None \
        else np.zeros(frame.n_points, np.int64)
    moving = frame.moving_flags if frame.moving_flags is not None \
        else np.zeros(frame.n_points, bool)
    with open(path, "w") as fh:
        fh.write("x,y,z,intensity,label,moving\n")
        for p, i, l, m in zip(frame.coords, frame.intensity, labels, moving):
            fh.write(f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r},"
                     f"{float(i)!r},{int(l)},{int(m)}\n")


def read_frame_csv(path, frame_index: int = 0) -> PointCloudFrame:
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    expected = ("x", "y", "z", "intensity", "label", "moving")
    if data.dtype.names != expected:
        raise ValueError(f"{path}: CSV header must be {','.join(expected)}")
    coords = np.stack([data["x"], data["y"], data["z"]], axis=1)
    return PointCloudFrame(coords, data["intensity"],
                           labels=data["label"].astype(np.int64),
                           moving_flags=data["moving"].astype(bool),
                           frame_index=frame_index)


def write_poses(poses, path) -> None:
    with open(path, "w") as fh:
        for p in poses:
            fh.write(" ".join(repr(float(v)) for v in p.matrix34().ravel()) + "\n")


def read_poses(path):
    poses = []
    with open(path) as fh:
        for line in fh:
            vals = [float(v) for v in line.split()]
            if len(vals) != 12:
                raise ValueError(f"{path}: pose lines need 12 floats, got {len(vals)}")
            m = np.array(vals).reshape(3, 4)
            poses.append(PoseSE3(m[:, :3], m[:, 3]))
    return poses


def write_checkpoint(named_arrays, path) -> None:
    """Versioned binary of named float32 tensors (parameters + running stats)."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype=np.float32)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def read_checkpoint(path) -> dict:
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected MVXP")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            out[name] = data.copy()
    return out


def load_params_into(params, state_dict: dict) -> None:
    """Write checkpoint arrays back into a parameter tree, shape-checked."""
    from .tensor import named_state, named_tensors
    names = dict(named_tensors(params))
    for name, arr in named_state(params):
        if name not in state_dict:
            raise KeyError(f"checkpoint is missing tensor {name!r}")
        src = state_dict[name]
        if tuple(src.shape) != tuple(arr.shape):
            raise ValueError(f"{name}: checkpoint shape {src.shape} != {arr.shape}")
        if name in names:
            names[name].data = src.astype(names[name].data.dtype)
        else:
            arr[...] = src
    return None


def write_memory_snapshot(grid: SparseVoxelGrid, path, frame_index: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(_MEM_MAGIC)
        fh.write(struct.pack("<IIII", _VERSION, frame_index, grid.n_voxels,
                             grid.width))
        fh.write(struct.pack("<f", grid.voxel_size))
        fh.write(grid.coords.astype("<i4").tobytes())
        fh.write(grid.features.data.astype("<f4").tobytes())


def read_memory_snapshot(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MEM_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected MVXM")
        version, frame_index, n, width = struct.unpack("<IIII", fh.read(16))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        (voxel_size,) = struct.unpack("<f", fh.read(4))
        coords = np.frombuffer(fh.read(12 * n), dtype="<i4").reshape(n, 3)
        feats = np.frombuffer(fh.read(4 * n * width), dtype="<f4").reshape(n, width)
    grid = SparseVoxelGrid(float(voxel_size), coords.copy(), feats.copy())
    return grid, frame_index


# ---------------------------------------------------------------- PLY export

def class_palette(num_classes: int) -> np.ndarray:
    base = np.array([
        [120, 120, 120], [230, 80, 60], [70, 130, 220], [90, 190, 90],
        [240, 200, 70], [170, 90, 200], [90, 200, 200], [250, 140, 30],
    ], dtype=np.uint8)
    reps = int(np.ceil(num_classes / len(base)))
    return np.tile(base, (reps, 1))[:num_classes]


def pca_colors(features: np.ndarray) -> np.ndarray:
    """Reduce feature rows to RGB via 3-component PCA, min-max scaled to 0..255."""
    x = np.asarray(features, dtype=np.float64)
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:3].T
    if proj.shape[1] < 3:
        proj = np.pad(proj, ((0, 0), (0, 3 - proj.shape[1])))
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.round(255.0 * (proj - lo) / span).astype(np.uint8)


def export_ply(positions: np.ndarray, colors: np.ndarray, path) -> None:
    """ASCII PLY with per-vertex position and color."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    if len(positions) != len(colors):
        raise ValueError("positions and colors must align")
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(positions)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(positions, colors):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")


# ---------------------------------------------------------------- run config

class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


@dataclass
class RunConfig:
    """Flat key = value configuration with sections; paper-given defaults."""

    # [network]
    v_b: float = 0.05
    v_m: float = 0.5
    d_m: int = 128
    num_classes: int = 4
    movable_classes: tuple = ()
    stage_widths: tuple = (16, 32, 64, 128, 128)
    decoder_width: int = 32
    padding_k: int = 5
    padding_hidden: int = 32
    width_scale: float = 1.0
    memory_crop_radius: float = 0.0          # 0 disables the crop
    padding_mode: str = "adaptive"           # adaptive | zero | offsets_only
    gru_mode: str = "blocks"                 # blocks | single_conv
    # [loss]
    beta_wce: float = 1.0
    beta_ls: float = 2.0
    beta_reg: float = 500.0
    reg_neighbors: int = 32
    weight_clamp_lo: float = 0.1
    weight_clamp_hi: float = 10.0
    # [train]
    phase1_epochs: int = 4
    phase2_epochs: int = 3
    warmup_frames: int = 10
    bptt_frames: int = 3
    lr: float = 0.003
    lr_decay: float = 0.9
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    cutmix_count: int = 5
    augment: bool = True
    # [data]
    sequences: int = 3
    frames: int = 30
    rays_azimuth: int = 168
    rays_elevation: int = 30
    noise_sigma: float = 0.02
    # [run]
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "out"
    checkpoint: str = ""

    _SECTIONS = {
        "network": ("v_b", "v_m", "d_m", "num_classes", "movable_classes",
                    "stage_widths", "decoder_width", "padding_k",
                    "padding_hidden", "width_scale", "memory_crop_radius",
                    "padding_mode", "gru_mode"),
        "loss": ("beta_wce", "beta_ls", "beta_reg", "reg_neighbors",
                 "weight_clamp_lo", "weight_clamp_hi"),
        "train": ("phase1_epochs", "phase2_epochs", "warmup_frames",
                  "bptt_frames", "lr", "lr_decay", "weight_decay",
                  "grad_clip", "cutmix_count", "augment"),
        "data": ("sequences", "frames", "rays_azimuth", "rays_elevation",
                 "noise_sigma"),
        "run": ("seed", "data_dir", "out_dir", "checkpoint"),
    }


def _parse_value(current, text: str):
    text = text.strip()
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        if not text:
            return ()
        return tuple(int(v) for v in text.replace(",", " ").split())
    return text


def parse_config(text: str) -> RunConfig:
    """Parse the sectioned key = value format; unknown keys are rejected."""
    config = RunConfig()
    known = {name for names in RunConfig._SECTIONS.values() for name in names}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in RunConfig._SECTIONS:
                raise ConfigError(section, f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(key, f"line {lineno}: unknown key {key!r}")
        try:
            setattr(config, key, _parse_value(getattr(config, key), value))
        except ValueError as exc:
            raise ConfigError(key, f"line {lineno}: bad value for {key}: {exc}") from exc
    return config


def serialize_config(config: RunConfig) -> str:
    lines = []
    for section, names in RunConfig._SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            value = getattr(config, name)
            if isinstance(value, tuple):
                value = " ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{name} = {value}")
        lines.append("")
    return "\n".join(lines)


def write_metrics_json(payload: dict, path) -> None:
    """Deterministic metrics document: sorted keys, fixed separators."""
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

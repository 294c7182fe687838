"""Sparse 3D convolutions and the gated recurrent memory refinement.

Stride-1 convolutions are submanifold: output sites equal input sites and each
output gathers only the occupied neighbors inside its stencil, so the active
set never dilates. Stride-2 convolutions emit the deduplicated half-resolution
coordinates; their transposed counterparts scatter back onto a cached
coordinate list and are exact adjoints of the paired downsampling.

Kernel maps are per-offset (out_row, in_row) pair lists built from the grid's
sorted key array; only real site pairs are gathered and multiplied, which on
surface-like occupancy skips roughly two thirds of a dense stencil.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .tensor import (BatchNorm, Tensor, add, concat_cols, leaky_relu, mul,
                     parameter, reshape, sigmoid, slice_cols,
                     sparse_conv_apply, sub, tanh)
from .voxel import SparseVoxelGrid, pack_keys

__all__ = [
    "SparseConvLayer",
    "ConvMaps",
    "sparse_conv",
    "sparse_transpose_conv",
    "ResBlock",
    "GateBlock",
    "GruParams",
    "gru_update",
    "stencil_offsets",
    "submanifold_maps",
    "strided_maps",
    "transposed_maps",
]


def stencil_offsets(kernel_size: int, stride: int) -> np.ndarray:
    """Kernel offsets in the order matching the kernel tensor's first 3 axes."""
    if stride == 1:
        r = (kernel_size - 1) // 2
        rng = range(-r, r + 1)
    else:
        rng = range(kernel_size)
    return np.array(list(itertools.product(rng, rng, rng)), dtype=np.int64)


def _lookup_keys(keys: np.ndarray, query_keys: np.ndarray) -> np.ndarray:
    if len(keys) == 0:
        return np.full(len(query_keys), -1, dtype=np.int64)
    pos = np.minimum(np.searchsorted(keys, query_keys), len(keys) - 1)
    return np.where(keys[pos] == query_keys, pos, -1).astype(np.int64)


@dataclass
class ConvMaps:
    """Concatenated (out_row, in_row) pairs grouped by stencil offset.

    ``bounds[j]:bounds[j+1]`` slices offset j's pairs; rows are unique within
    one offset for every map kind built here.
    """

    in_rows: np.ndarray
    out_rows: np.ndarray
    bounds: np.ndarray
    m_out: int
    out_coords: np.ndarray | None = None
    out_keys: np.ndarray | None = None


def _offset_key_deltas(offsets: np.ndarray) -> np.ndarray:
    # packing is linear per axis, so key(p + d) = key(p) + delta(d);
    # multiplication (not shifts) handles negative offset components
    return (offsets[:, 0] * (1 << 42) + offsets[:, 1] * (1 << 21)
            + offsets[:, 2])


def _maps_by_key_shift(base_keys: np.ndarray, source_keys: np.ndarray,
                       offsets: np.ndarray, m_out: int,
                       out_coords=None, out_keys=None) -> ConvMaps:
    deltas = _offset_key_deltas(offsets)
    in_parts, out_parts, counts = [], [], []
    for d in deltas:
        rows = _lookup_keys(source_keys, base_keys + d)
        hit = np.flatnonzero(rows >= 0)
        out_parts.append(hit)
        in_parts.append(rows[hit])
        counts.append(len(hit))
    bounds = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return ConvMaps(np.concatenate(in_parts), np.concatenate(out_parts),
                    bounds, m_out=m_out, out_coords=out_coords, out_keys=out_keys)


def submanifold_maps(coords: np.ndarray, keys: np.ndarray, kernel_size: int) -> ConvMaps:
    """Stride-1 maps: output sites equal input sites."""
    offsets = stencil_offsets(kernel_size, 1)
    return _maps_by_key_shift(keys, keys, offsets, m_out=len(coords))


def strided_maps(coords: np.ndarray, keys: np.ndarray, kernel_size: int) -> ConvMaps:
    """Stride-2 maps onto the deduplicated half-resolution coordinates."""
    down = np.floor_divide(coords.astype(np.int64), 2)
    out_keys, first = np.unique(pack_keys(down), return_index=True)
    out_coords = down[first].astype(np.int32)
    base = pack_keys(2 * out_coords.astype(np.int64))
    offsets = stencil_offsets(kernel_size, 2)
    return _maps_by_key_shift(base, keys, offsets, m_out=len(out_coords),
                              out_coords=out_coords, out_keys=out_keys)


def transposed_maps(src_keys: np.ndarray, target_coords: np.ndarray,
                    kernel_size: int) -> ConvMaps:
    """Scatter maps from a stride-2 grid back onto cached target coordinates."""
    tgt = target_coords.astype(np.int64)
    parents = np.floor_divide(tgt, 2)
    delta = tgt - 2 * parents
    col = (delta[:, 0] * kernel_size + delta[:, 1]) * kernel_size + delta[:, 2]
    rows = _lookup_keys(src_keys, pack_keys(parents))
    order = np.argsort(col, kind="stable")
    keep = order[rows[order] >= 0]
    counts = np.bincount(col[keep], minlength=kernel_size ** 3)
    bounds = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return ConvMaps(rows[keep], keep.astype(np.int64), bounds, m_out=len(tgt))


@dataclass
class SparseConvLayer:
    """Kernel (K, K, K, Cin, Cout) + bias, stride 1 or 2, optionally transposed."""

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    transposed: bool = False

    def __post_init__(self):
        k = self.kernel.data.shape[0]
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.stride == 1 and k % 2 == 0:
            raise ValueError("stride-1 kernels must have odd size")

    @property
    def kernel_size(self) -> int:
        return self.kernel.data.shape[0]

    @property
    def in_width(self) -> int:
        return self.kernel.data.shape[3]

    @property
    def out_width(self) -> int:
        return self.kernel.data.shape[4]

    @staticmethod
    def create(rng: np.random.Generator, kernel_size: int, c_in: int, c_out: int,
               stride: int = 1, transposed: bool = False, dtype=np.float32) -> "SparseConvLayer":
        fan_in = kernel_size ** 3 * c_in
        bound = np.sqrt(2.0 / (1 + 0.01 ** 2)) * np.sqrt(3.0 / fan_in)
        kernel = rng.uniform(-bound, bound,
                             size=(kernel_size, kernel_size, kernel_size, c_in, c_out))
        return SparseConvLayer(parameter(kernel, dtype),
                               parameter(np.zeros(c_out), dtype),
                               stride=stride, transposed=transposed)


def _apply_maps(features: Tensor, maps: ConvMaps, layer: SparseConvLayer) -> Tensor:
    k, c_in, c_out = layer.kernel_size, layer.in_width, layer.out_width
    w3 = reshape(layer.kernel, (k ** 3, c_in, c_out))
    return sparse_conv_apply(features, maps.in_rows, maps.out_rows, maps.bounds,
                             w3, layer.bias, maps.m_out)


def _apply_maps_pair(features: Tensor, maps: ConvMaps, layer_a: SparseConvLayer,
                     layer_b: SparseConvLayer):
    """Two convolutions with identical stencil/input in one gather pass.

    Kernels are concatenated along the output channels, so the math per output
    column is unchanged; the shared gather/scatter traffic is paid once.
    """
    k, c_in = layer_a.kernel_size, layer_a.in_width
    ca, cb = layer_a.out_width, layer_b.out_width
    wa = reshape(layer_a.kernel, (k ** 3 * c_in, ca))
    wb = reshape(layer_b.kernel, (k ** 3 * c_in, cb))
    w3 = reshape(concat_cols([wa, wb]), (k ** 3, c_in, ca + cb))
    bias = reshape(concat_cols([reshape(layer_a.bias, (1, ca)),
                                reshape(layer_b.bias, (1, cb))]), (ca + cb,))
    out = sparse_conv_apply(features, maps.in_rows, maps.out_rows, maps.bounds,
                            w3, bias, maps.m_out)
    return slice_cols(out, 0, ca), slice_cols(out, ca, ca + cb)


def sparse_conv(grid: SparseVoxelGrid, layer: SparseConvLayer,
                maps: ConvMaps | None = None) -> SparseVoxelGrid:
    """Apply a (possibly strided) sparse convolution.

    ``maps`` lets callers reuse precomputed kernel maps when several layers
    run over the same coordinate set.
    """
    if layer.transposed:
        raise ValueError("use sparse_transpose_conv for transposed layers")
    if grid.width != layer.in_width:
        raise ValueError(f"feature width {grid.width} != layer input width {layer.in_width}")
    if layer.stride == 1:
        if maps is None:
            maps = submanifold_maps(grid.coords, grid.keys, layer.kernel_size)
        feats = _apply_maps(grid.features, maps, layer)
        return SparseVoxelGrid(grid.voxel_size, grid.coords, feats, keys=grid.keys)
    if maps is None:
        maps = strided_maps(grid.coords, grid.keys, layer.kernel_size)
    feats = _apply_maps(grid.features, maps, layer)
    return SparseVoxelGrid(grid.voxel_size * 2, maps.out_coords, feats,
                           keys=maps.out_keys)


def sparse_transpose_conv(grid: SparseVoxelGrid, layer: SparseConvLayer,
                          target_coords: np.ndarray,
                          maps: ConvMaps | None = None) -> SparseVoxelGrid:
    """Scatter a half-resolution grid back onto the cached target coordinates."""
    if not layer.transposed:
        raise ValueError("layer is not transposed")
    if target_coords is None:
        raise ValueError("transpose conv requires the cached coordinate set")
    if grid.width != layer.in_width:
        raise ValueError(f"feature width {grid.width} != layer input width {layer.in_width}")
    target_coords = np.asarray(target_coords, dtype=np.int32).reshape(-1, 3)
    if maps is None:
        maps = transposed_maps(grid.keys, target_coords, layer.kernel_size)
    feats = _apply_maps(grid.features, maps, layer)
    return SparseVoxelGrid(grid.voxel_size / 2, target_coords, feats)


@dataclass
class ResBlock:
    """SC[3,1] -> BN -> LR -> SC[3,1] -> BN, skip, LR.

    The downsampling variant prepends SC[2,2] on both the main and the skip
    path; a width change at stride 1 uses a 1x1 projection on the skip.
    """

    conv1: SparseConvLayer
    bn1: BatchNorm
    conv2: SparseConvLayer
    bn2: BatchNorm
    down_main: SparseConvLayer | None = None
    down_skip: SparseConvLayer | None = None
    skip_proj: SparseConvLayer | None = None

    @staticmethod
    def create(rng, c_in: int, c_out: int, downsample: bool = False,
               dtype=np.float32) -> "ResBlock":
        body_in = c_out if downsample else c_in
        block = ResBlock(
            conv1=SparseConvLayer.create(rng, 3, body_in, c_out, dtype=dtype),
            bn1=BatchNorm.create(c_out, dtype),
            conv2=SparseConvLayer.create(rng, 3, c_out, c_out, dtype=dtype),
            bn2=BatchNorm.create(c_out, dtype),
        )
        if downsample:
            block.down_main = SparseConvLayer.create(rng, 2, c_in, c_out, stride=2, dtype=dtype)
            block.down_skip = SparseConvLayer.create(rng, 2, c_in, c_out, stride=2, dtype=dtype)
        elif c_in != c_out:
            block.skip_proj = SparseConvLayer.create(rng, 1, c_in, c_out, dtype=dtype)
        return block

    def __call__(self, grid: SparseVoxelGrid, training: bool) -> SparseVoxelGrid:
        if self.down_main is not None:
            maps = strided_maps(grid.coords, grid.keys, self.down_main.kernel_size)
            f_main, f_skip = _apply_maps_pair(grid.features, maps,
                                              self.down_main, self.down_skip)
            main = SparseVoxelGrid(grid.voxel_size * 2, maps.out_coords, f_main,
                                   keys=maps.out_keys)
            skip = SparseVoxelGrid(grid.voxel_size * 2, maps.out_coords, f_skip,
                                   keys=maps.out_keys)
        else:
            main = grid
            skip = sparse_conv(grid, self.skip_proj) if self.skip_proj is not None else grid
        sub_maps = submanifold_maps(main.coords, main.keys, self.conv1.kernel_size)
        h = _apply_maps(main.features, sub_maps, self.conv1)
        h = leaky_relu(self.bn1(h, training))
        h = _apply_maps(h, sub_maps, self.conv2)
        h = self.bn2(h, training)
        feats = leaky_relu(add(h, skip.features))
        return SparseVoxelGrid(main.voxel_size, main.coords, feats, keys=main.keys)


@dataclass
class GateBlock:
    """One refinement gate: SC[3,1] -> BN -> LR -> SC[2,2] down -> BN -> LR
    -> STC[2,2] up -> BN -> LR -> SC[3,1]. Widens the receptive field one
    level down, then restores the original coordinate set."""

    conv_in: SparseConvLayer
    bn1: BatchNorm
    conv_down: SparseConvLayer
    bn2: BatchNorm
    conv_up: SparseConvLayer
    bn3: BatchNorm
    conv_out: SparseConvLayer

    @staticmethod
    def create(rng, c_in: int, c_mid: int, dtype=np.float32) -> "GateBlock":
        return GateBlock(
            conv_in=SparseConvLayer.create(rng, 3, c_in, c_mid, dtype=dtype),
            bn1=BatchNorm.create(c_mid, dtype),
            conv_down=SparseConvLayer.create(rng, 2, c_mid, c_mid, stride=2, dtype=dtype),
            bn2=BatchNorm.create(c_mid, dtype),
            conv_up=SparseConvLayer.create(rng, 2, c_mid, c_mid, stride=2,
                                           transposed=True, dtype=dtype),
            bn3=BatchNorm.create(c_mid, dtype),
            conv_out=SparseConvLayer.create(rng, 3, c_mid, c_mid, dtype=dtype),
        )

    def __call__(self, features: Tensor, geom: "_GateGeometry", training: bool) -> Tensor:
        h = _apply_maps(features, geom.sub_maps, self.conv_in)
        return self.tail(h, geom, training)

    def tail(self, h: Tensor, geom: "_GateGeometry", training: bool) -> Tensor:
        """Everything after the input convolution (see _apply_maps_pair)."""
        h = leaky_relu(self.bn1(h, training))
        h = _apply_maps(h, geom.down_maps, self.conv_down)
        h = leaky_relu(self.bn2(h, training))
        h = _apply_maps(h, geom.up_maps, self.conv_up)
        h = leaky_relu(self.bn3(h, training))
        return _apply_maps(h, geom.sub_maps, self.conv_out)


@dataclass
class _GateGeometry:
    """Kernel maps shared by the three gates over one coordinate set."""

    sub_maps: ConvMaps
    down_maps: ConvMaps
    up_maps: ConvMaps

    @staticmethod
    def build(coords: np.ndarray, keys: np.ndarray) -> "_GateGeometry":
        sub_maps = submanifold_maps(coords, keys, 3)
        down_maps = strided_maps(coords, keys, 2)
        up_maps = transposed_maps(down_maps.out_keys, coords, 2)
        return _GateGeometry(sub_maps, down_maps, up_maps)


@dataclass
class SingleConvGate:
    """Vanilla recurrence variant: one submanifold convolution per gate."""

    conv_in: SparseConvLayer

    @staticmethod
    def create(rng, c_in: int, c_mid: int, dtype=np.float32) -> "SingleConvGate":
        return SingleConvGate(SparseConvLayer.create(rng, 3, c_in, c_mid, dtype=dtype))

    def __call__(self, features: Tensor, geom: "_GateGeometry", training: bool) -> Tensor:
        return _apply_maps(features, geom.sub_maps, self.conv_in)

    def tail(self, h: Tensor, geom: "_GateGeometry", training: bool) -> Tensor:
        return h


@dataclass
class GruParams:
    """Reset / update / candidate gate blocks of the memory refinement."""

    reset_gate: GateBlock | SingleConvGate
    update_gate: GateBlock | SingleConvGate
    candidate: GateBlock | SingleConvGate

    @staticmethod
    def create(rng, d_m: int, dtype=np.float32, mode: str = "blocks") -> "GruParams":
        gate = {"blocks": GateBlock, "single_conv": SingleConvGate}.get(mode)
        if gate is None:
            raise ValueError(f"unknown recurrence mode {mode!r}")
        return GruParams(
            reset_gate=gate.create(rng, 2 * d_m, d_m, dtype),
            update_gate=gate.create(rng, 2 * d_m, d_m, dtype),
            candidate=gate.create(rng, 2 * d_m, d_m, dtype),
        )


def gru_update(obs_padded: SparseVoxelGrid, memory_padded: SparseVoxelGrid,
               params: GruParams, training: bool = False) -> SparseVoxelGrid:
    """Gated refinement of the padded memory by the padded observation.

    r = sigmoid(Wr(x, h)); z = sigmoid(Wz(x, h)); c = tanh(Wu(x, r * h));
    new = c * z + h * (1 - z). Both inputs must be row-aligned over one shared
    coordinate set, which the output keeps.
    """
    if not np.array_equal(obs_padded.coords, memory_padded.coords):
        raise ValueError("padded observation and memory must share one coordinate list")
    x = obs_padded.features
    h = memory_padded.features
    geom = _GateGeometry.build(obs_padded.coords, obs_padded.keys)
    xh = concat_cols([x, h])
    # reset and update consume the same input: run their first convs fused
    hr, hz = _apply_maps_pair(xh, geom.sub_maps, params.reset_gate.conv_in,
                              params.update_gate.conv_in)
    r = sigmoid(params.reset_gate.tail(hr, geom, training))
    z = sigmoid(params.update_gate.tail(hz, geom, training))
    cand = tanh(params.candidate(concat_cols([x, mul(r, h)]), geom, training))
    new = add(mul(cand, z), mul(h, sub(1.0, z)))
    return SparseVoxelGrid(obs_padded.voxel_size, obs_padded.coords, new,
                           keys=obs_padded.keys)

"""Encoder, memory update, decoder, motion fusion and the per-sweep step.

The pipeline per incoming sweep: (1) encode point-level and voxel-level
embeddings, (2) update the sparse latent memory (align to the new ego frame,
pad both sides onto the coordinate union, gated refinement), (3) decode
per-point class logits by combining memory context with point detail.

A single-frame baseline mode skips the recurrent update and lets the decoder
read the instantaneous observation grid instead of the memory; everything else
is shared, so memory-vs-baseline comparisons isolate the temporal path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .padding import PaddingParams, adaptive_pad
from .pose import PoseSE3, align_memory, compose
from .sparseconv import (GruParams, ResBlock, SparseConvLayer, gru_update,
                         sparse_conv, sparse_transpose_conv, submanifold_maps,
                         transposed_maps, _apply_maps, _apply_maps_pair)
from .tensor import (BatchNorm, Tensor, add, concat_cols, constant,
                     gather_rows, leaky_relu, linear, log_softmax, no_grad,
                     parameter, slice_cols, softmax_rows)
from .voxel import (PointCloudFrame, SparseVoxelGrid, pack_keys, re_voxelize,
                    voxelize)

__all__ = [
    "NetworkConfig",
    "Mlp",
    "UpBlock",
    "EncoderParams",
    "DecoderParams",
    "NetworkParams",
    "StreamState",
    "EncodeResult",
    "init_params",
    "encode",
    "update_memory",
    "decode",
    "fuse_motion",
    "step",
    "StepResult",
    "memory_lookup_rows",
]


@dataclass
class NetworkConfig:
    """Shapes and sizes of the whole network.

    ``stage_widths`` are the voxel-branch channel widths at strides
    (1, 2, 4, 8, 16); the two upsampling blocks come back to stride 4 at
    ``d_m`` channels. ``width_scale`` shrinks every width for small test nets.
    """

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
    memory_crop_radius: float | None = None
    padding_mode: str = "adaptive"
    gru_mode: str = "blocks"
    dtype: type = np.float32

    def __post_init__(self):
        if self.v_m < self.v_b:
            raise ValueError("memory voxel size must be >= encoder voxel size")
        if self.d_m <= 0:
            raise ValueError("embedding width must be positive")

    def scaled(self, w: int) -> int:
        return max(2, int(round(w * self.width_scale)))

    @property
    def widths(self) -> tuple:
        return tuple(self.scaled(w) for w in self.stage_widths)

    @property
    def embed(self) -> int:
        return self.scaled(self.d_m)

    @property
    def dec_width(self) -> int:
        return self.scaled(self.decoder_width)

    @property
    def num_movable(self) -> int:
        return len(self.movable_classes)

    @property
    def num_final(self) -> int:
        return self.num_classes + self.num_movable

    @staticmethod
    def micro(num_classes: int = 3, movable: tuple = ()) -> "NetworkConfig":
        """Tiny float64 config for finite-difference checking."""
        return NetworkConfig(
            v_b=0.25, v_m=0.5, d_m=2, num_classes=num_classes,
            movable_classes=movable, stage_widths=(2, 2, 2, 2, 2),
            decoder_width=2, padding_k=2, padding_hidden=2, dtype=np.float64)


@dataclass
class Mlp:
    """Two linear layers with leaky-relu after each."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(rng, c_in: int, c_hidden: int, c_out: int, dtype=np.float32) -> "Mlp":
        return Mlp(
            w1=parameter(_kaiming(rng, c_in, c_hidden), dtype),
            b1=parameter(np.zeros(c_hidden), dtype),
            w2=parameter(_kaiming(rng, c_hidden, c_out), dtype),
            b2=parameter(np.zeros(c_out), dtype),
        )

    def __call__(self, x: Tensor) -> Tensor:
        h = leaky_relu(linear(x, self.w1, self.b1))
        return leaky_relu(linear(h, self.w2, self.b2))


def _kaiming(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(2.0 / (1 + 0.01 ** 2)) * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class UpBlock:
    """Transpose-conv upsampling prepended on both paths of a residual body."""

    up_main: SparseConvLayer
    up_skip: SparseConvLayer
    conv1: SparseConvLayer
    bn1: BatchNorm
    conv2: SparseConvLayer
    bn2: BatchNorm

    @staticmethod
    def create(rng, c_in: int, c_out: int, dtype=np.float32) -> "UpBlock":
        return UpBlock(
            up_main=SparseConvLayer.create(rng, 2, c_in, c_out, stride=2, transposed=True, dtype=dtype),
            up_skip=SparseConvLayer.create(rng, 2, c_in, c_out, stride=2, transposed=True, dtype=dtype),
            conv1=SparseConvLayer.create(rng, 3, c_out, c_out, dtype=dtype),
            bn1=BatchNorm.create(c_out, dtype),
            conv2=SparseConvLayer.create(rng, 3, c_out, c_out, dtype=dtype),
            bn2=BatchNorm.create(c_out, dtype),
        )

    def __call__(self, grid: SparseVoxelGrid, target_coords: np.ndarray,
                 training: bool) -> SparseVoxelGrid:
        target_coords = np.asarray(target_coords, dtype=np.int32).reshape(-1, 3)
        up_maps = transposed_maps(grid.keys, target_coords, 2)
        f_main, f_skip = _apply_maps_pair(grid.features, up_maps,
                                          self.up_main, self.up_skip)
        keys = pack_keys(target_coords)
        sub_maps = submanifold_maps(target_coords, keys, 3)
        h = _apply_maps(f_main, sub_maps, self.conv1)
        h = leaky_relu(self.bn1(h, training))
        h = _apply_maps(h, sub_maps, self.conv2)
        h = self.bn2(h, training)
        feats = leaky_relu(add(h, f_skip))
        return SparseVoxelGrid(grid.voxel_size / 2, target_coords, feats, keys=keys)


@dataclass
class EncoderParams:
    point_mlp1: Mlp
    point_mlp2: Mlp
    down_blocks: list
    up1: UpBlock
    up2: UpBlock


@dataclass
class DecoderParams:
    combine_w: Tensor
    combine_b: Tensor
    point_mlp: Mlp
    block1: ResBlock
    block2: ResBlock
    sem_w: Tensor
    sem_b: Tensor
    motion_w: Tensor
    motion_b: Tensor


@dataclass
class NetworkParams:
    encoder: EncoderParams
    padding: PaddingParams
    gru: GruParams
    decoder: DecoderParams


def init_params(config: NetworkConfig, seed: int = 0) -> NetworkParams:
    """Seeded Kaiming-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dt = config.dtype
    w0, w1, w2, w3, w4 = config.widths
    d_m, w_dec = config.embed, config.dec_width
    encoder = EncoderParams(
        point_mlp1=Mlp.create(rng, 7, w0, w0, dt),
        point_mlp2=Mlp.create(rng, w0, d_m, d_m, dt),
        down_blocks=[
            ResBlock.create(rng, w0, w1, downsample=True, dtype=dt),
            ResBlock.create(rng, w1, w2, downsample=True, dtype=dt),
            ResBlock.create(rng, w2, w3, downsample=True, dtype=dt),
            ResBlock.create(rng, w3, w4, downsample=True, dtype=dt),
        ],
        up1=UpBlock.create(rng, w4, w3, dt),
        up2=UpBlock.create(rng, w3, d_m, dt),
    )
    padding = PaddingParams.create(rng, k=config.padding_k,
                                   hidden=config.padding_hidden, dtype=dt,
                                   mode=config.padding_mode)
    gru = GruParams.create(rng, d_m, dt, mode=config.gru_mode)
    decoder = DecoderParams(
        combine_w=parameter(_kaiming(rng, d_m, w_dec), dt),
        combine_b=parameter(np.zeros(w_dec), dt),
        point_mlp=Mlp.create(rng, d_m, w_dec, w_dec, dt),
        block1=ResBlock.create(rng, w_dec, w_dec, dtype=dt),
        block2=ResBlock.create(rng, w_dec, w_dec, dtype=dt),
        sem_w=parameter(_kaiming(rng, w_dec, config.num_classes), dt),
        sem_b=parameter(np.zeros(config.num_classes), dt),
        motion_w=parameter(_kaiming(rng, w_dec, 2), dt),
        motion_b=parameter(np.zeros(2), dt),
    )
    return NetworkParams(encoder, padding, gru, decoder)


@dataclass
class EncodeResult:
    point_embeddings: Tensor          # (N, d_m)
    coarse: SparseVoxelGrid           # at 4 * v_b, width d_m
    stage_counts: list                # occupied voxels per stage


def encode(frame: PointCloudFrame, params: NetworkParams, config: NetworkConfig,
           training: bool = False) -> EncodeResult:
    """Point branch (7-dim input through two shared MLPs) + voxel branch
    (4 strided residual blocks down, 2 upsampling blocks back to stride 4)."""
    if frame.n_points == 0:
        raise ValueError("cannot encode an empty frame")
    pos = frame.coords
    vox_idx = np.floor(pos / config.v_b)
    offsets = pos - (vox_idx + 0.5) * config.v_b
    x7 = constant(np.hstack([pos, frame.intensity[:, None], offsets]).astype(config.dtype))
    e1 = params.encoder.point_mlp1(x7)
    point_emb = params.encoder.point_mlp2(e1)

    g0, _ = voxelize(e1, pos, config.v_b)
    stages = [g0.n_voxels]
    grids = [g0]
    g = g0
    for block in params.encoder.down_blocks:
        g = block(g, training)
        grids.append(g)
        stages.append(g.n_voxels)
    u1 = params.encoder.up1(g, grids[3].coords, training)
    stages.append(u1.n_voxels)
    u2 = params.encoder.up2(u1, grids[2].coords, training)
    stages.append(u2.n_voxels)
    return EncodeResult(point_embeddings=point_emb, coarse=u2, stage_counts=stages)


@dataclass
class StreamState:
    """Per-sequence recurrent state: the latent memory plus bookkeeping."""

    memory: SparseVoxelGrid | None = None
    frame_count: int = 0
    cumulative_pose: PoseSE3 = field(default_factory=PoseSE3.identity)


def observation_grid(coarse: SparseVoxelGrid, config: NetworkConfig) -> SparseVoxelGrid:
    """Re-bin the coarse encoder grid at the memory voxel size."""
    return re_voxelize(coarse, coarse.centers(), config.v_m)


def update_memory(state: StreamState, coarse: SparseVoxelGrid, pose: PoseSE3,
                  params: NetworkParams, config: NetworkConfig,
                  training: bool = False) -> StreamState:
    """Advance the latent memory by one frame.

    Frame 0 initializes the memory directly from the observation grid; later
    frames align the memory into the new ego frame, pad both sides onto the
    coordinate union, and apply the gated refinement.
    """
    obs = observation_grid(coarse, config)
    if state.memory is None:
        memory = obs
    else:
        aligned = align_memory(state.memory, pose)
        padded = adaptive_pad(aligned, obs, params.padding)
        memory = gru_update(padded.observation, padded.memory, params.gru, training)
    if config.memory_crop_radius is not None:
        keep = np.flatnonzero(
            np.linalg.norm(memory.centers(), axis=1) <= config.memory_crop_radius)
        memory = SparseVoxelGrid(memory.voxel_size, memory.coords[keep],
                                 gather_rows(memory.features, keep),
                                 keys=memory.keys[keep])
    return StreamState(memory=memory, frame_count=state.frame_count + 1,
                       cumulative_pose=compose(pose, state.cumulative_pose))


_FALLBACK_OFFSETS = np.array(
    [o for o in itertools.product(range(-3, 4), repeat=3) if o != (0, 0, 0)],
    dtype=np.int64)


def memory_lookup_rows(grid: SparseVoxelGrid, positions: np.ndarray,
                       max_rings: int = 3) -> np.ndarray:
    """Memory row per point; misses resolve to the metric-nearest occupied
    voxel within ``max_rings`` Chebyshev rings, else -1 (zero feature)."""
    idx = np.floor(positions / grid.voxel_size).astype(np.int64)
    rows = grid.lookup(idx)
    miss = np.flatnonzero(rows < 0)
    if len(miss) == 0:
        return rows
    offs = _FALLBACK_OFFSETS[np.max(np.abs(_FALLBACK_OFFSETS), axis=1) <= max_rings]
    cand_coords = idx[miss][:, None, :] + offs[None, :, :]
    cand_rows = grid.lookup(cand_coords.reshape(-1, 3)).reshape(len(miss), -1)
    centers = (cand_coords.astype(np.float64) + 0.5) * grid.voxel_size
    d2 = ((centers - positions[miss][:, None, :]) ** 2).sum(axis=2)
    d2[cand_rows < 0] = np.inf
    # ties by packed key: offsets are enumerated in ascending lexicographic
    # order, so the first argmin is the smallest-key candidate
    best = np.argmin(d2, axis=1)
    found = np.isfinite(d2[np.arange(len(miss)), best])
    rows[miss[found]] = cand_rows[np.arange(len(miss)), best][found]
    return rows


def decode(memory: SparseVoxelGrid, point_embeddings: Tensor,
           frame: PointCloudFrame, params: NetworkParams, config: NetworkConfig,
           training: bool = False):
    """Per-point logits from memory context plus point detail.

    Memory features are read at each point's memory voxel (nearest occupied on
    a miss), added to the point embeddings, projected, refined on a fine grid
    at v_b / 4 and gathered back per point; a parallel MLP on the raw point
    embeddings keeps the fine-grained details.
    """
    if memory is None or memory.n_voxels == 0:
        raise ValueError("decode requires a non-empty memory grid")
    dec = params.decoder
    rows = memory_lookup_rows(memory, frame.coords)
    mem_pt = gather_rows(memory.features, rows)
    combined = add(mem_pt, point_embeddings)
    proj = linear(combined, dec.combine_w, dec.combine_b)
    fine, p2v = voxelize(proj, frame.coords, config.v_b / 4.0)
    fine = dec.block1(fine, training)
    fine = dec.block2(fine, training)
    fine_pt = gather_rows(fine.features, p2v)
    fused = add(fine_pt, dec.point_mlp(point_embeddings))
    sem_logits = linear(fused, dec.sem_w, dec.sem_b)
    motion_logits = linear(fused, dec.motion_w, dec.motion_b)
    return sem_logits, motion_logits


def fuse_motion(sem_logits: Tensor, motion_logits: Tensor,
                movable_classes, num_classes: int) -> Tensor:
    """Split each movable class into static/moving by adding normalized motion
    log-scores; probability mass of the class is preserved.

    Output layout: columns 0..C-1 keep the class order (movable slots hold the
    static logit); columns C.. append the moving logits of the movable classes
    in ascending class order.
    """
    movable = sorted(movable_classes)
    if not movable:
        return sem_logits
    m = log_softmax(motion_logits)
    m_static = slice_cols(m, 0, 1)
    m_moving = slice_cols(m, 1, 2)
    cols = []
    for c in range(num_classes):
        col = slice_cols(sem_logits, c, c + 1)
        cols.append(add(col, m_static) if c in movable else col)
    for c in movable:
        cols.append(add(slice_cols(sem_logits, c, c + 1), m_moving))
    return concat_cols(cols)


@dataclass
class StepResult:
    predictions: np.ndarray       # (N,) final class ids
    scores: np.ndarray            # (N, num_final) softmax probabilities
    sem_logits: Tensor
    motion_logits: Tensor
    final_logits: Tensor
    state: StreamState
    encode_result: EncodeResult


def step(state: StreamState, frame: PointCloudFrame, pose: PoseSE3,
         params: NetworkParams, config: NetworkConfig,
         sfb: bool = False) -> StepResult:
    """One full inference step: encode, update memory, decode, argmax.

    Runs without gradient recording so the carried state stays a plain leaf;
    training loops compose encode / update_memory / decode themselves.
    """
    with no_grad():
        enc = encode(frame, params, config, training=False)
        if sfb:
            read_grid = observation_grid(enc.coarse, config)
            new_state = state
        else:
            new_state = update_memory(state, enc.coarse, pose, params, config,
                                      training=False)
            read_grid = new_state.memory
        sem_logits, motion_logits = decode(read_grid, enc.point_embeddings,
                                           frame, params, config, training=False)
        final = fuse_motion(sem_logits, motion_logits, config.movable_classes,
                            config.num_classes)
        scores = softmax_rows(final).data
    preds = np.argmax(scores, axis=1)
    return StepResult(predictions=preds, scores=scores, sem_logits=sem_logits,
                      motion_logits=motion_logits, final_logits=final,
                      state=new_state, encode_result=enc)

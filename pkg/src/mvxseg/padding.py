"""Adaptive padding: reconcile sparsity between aligned memory and observation.

Both grids are completed onto the union of their coordinate sets. A missing
entry is synthesized as a weighted sum of its k nearest source voxels, with
weights produced by a small MLP over a 5-dim pair descriptor (3-dim metric
offset, feature L2 distance, feature cosine similarity) and softmax-normalized
across the neighborhood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, concat_cols, concat_rows, constant, gather_rows,
                     leaky_relu, linear, mul, parameter, reshape, segment_mean,
                     softmax_rows, sqrt, sum_axis)
from .voxel import NeighborList, SparseVoxelGrid, knn, pack_keys

__all__ = ["PadMlp", "PaddingParams", "PaddedPair", "partition",
           "pad_weights", "pad_features", "adaptive_pad"]

_DESCRIPTOR_DIM = 5


@dataclass
class PadMlp:
    """Shared MLP mapping a 5-dim pair descriptor to a scalar logit."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @staticmethod
    def create(rng: np.random.Generator, hidden: int = 32, dtype=np.float32) -> "PadMlp":
        def kaiming(fan_in, fan_out):
            bound = np.sqrt(2.0 / (1 + 0.01 ** 2)) * np.sqrt(3.0 / fan_in)
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        return PadMlp(
            w1=parameter(kaiming(_DESCRIPTOR_DIM, hidden), dtype),
            b1=parameter(np.zeros(hidden), dtype),
            w2=parameter(kaiming(hidden, hidden), dtype),
            b2=parameter(np.zeros(hidden), dtype),
            w3=parameter(kaiming(hidden, 1), dtype),
            b3=parameter(np.zeros(1), dtype),
        )

    def __call__(self, descriptors: Tensor) -> Tensor:
        h = leaky_relu(linear(descriptors, self.w1, self.b1))
        h = leaky_relu(linear(h, self.w2, self.b2))
        return linear(h, self.w3, self.b3)


@dataclass
class PaddingParams:
    """One pad MLP per direction plus the neighborhood size.

    ``mode`` selects the synthesis rule: "adaptive" (full descriptor),
    "offsets_only" (feature cues zeroed, continuous-conv style), or "zero"
    (plain zero fill, the ablation baseline).
    """

    into_memory: PadMlp     # synthesize memory rows at new observation coords
    into_observation: PadMlp  # synthesize observation rows at memory-only coords
    k: int = 5
    mode: str = "adaptive"

    def __post_init__(self):
        if self.mode not in ("adaptive", "offsets_only", "zero"):
            raise ValueError(f"unknown padding mode {self.mode!r}")

    @staticmethod
    def create(rng: np.random.Generator, k: int = 5, hidden: int = 32,
               dtype=np.float32, mode: str = "adaptive") -> "PaddingParams":
        if k < 1:
            raise ValueError("padding neighborhood k must be >= 1")
        return PaddingParams(PadMlp.create(rng, hidden, dtype),
                             PadMlp.create(rng, hidden, dtype), k=k, mode=mode)


@dataclass
class PaddedPair:
    """Memory and observation grids completed onto one shared coordinate list."""

    memory: SparseVoxelGrid
    observation: SparseVoxelGrid


def partition(memory: SparseVoxelGrid, obs: SparseVoxelGrid):
    """Split the two coordinate sets into (shared, obs_only, mem_only)."""
    if memory.voxel_size != obs.voxel_size:
        raise ValueError(
            f"voxel size mismatch: memory {memory.voxel_size} vs observation {obs.voxel_size}")
    shared_mask_obs = np.isin(obs.keys, memory.keys, assume_unique=True)
    shared_mask_mem = np.isin(memory.keys, obs.keys, assume_unique=True)
    shared = obs.coords[shared_mask_obs]
    obs_only = obs.coords[~shared_mask_obs]
    mem_only = memory.coords[~shared_mask_mem]
    return shared, obs_only, mem_only


def _pair_descriptors(target_positions: np.ndarray, target_features: Tensor,
                      source: SparseVoxelGrid, neighbors: NeighborList,
                      feature_cues: bool = True) -> Tensor:
    """Build (T*k, 5) descriptor rows for every (target, neighbor) pair.

    With ``feature_cues`` off the distance/similarity slots are zeroed, which
    reduces the weighting to offsets-only attention.
    """
    t, k = neighbors.indices.shape
    dtype = target_features.data.dtype
    offsets = constant(neighbors.offsets.reshape(t * k, 3).astype(dtype))
    if not feature_cues:
        zeros = constant(np.zeros((t * k, 2), dtype=dtype))
        return concat_cols([offsets, zeros])
    flat_idx = neighbors.indices.reshape(-1)
    src_feats = gather_rows(source.features, flat_idx)            # (T*k, d)
    tgt_feats = gather_rows(target_features,
                            np.repeat(np.arange(t, dtype=np.int64), k))
    diff = src_feats - tgt_feats
    dist = sqrt(sum_axis(mul(diff, diff), 1))                      # (T*k, 1)
    dot = sum_axis(mul(src_feats, tgt_feats), 1)
    src_norm = sqrt(sum_axis(mul(src_feats, src_feats), 1))
    tgt_norm = sqrt(sum_axis(mul(tgt_feats, tgt_feats), 1))
    norm_prod = mul(src_norm, tgt_norm)
    # cosine is defined as 0 when either feature has zero norm; the +mask in
    # the denominator only activates there, keeping the norm gradient intact
    nonzero = (norm_prod.data > 0).astype(dot.data.dtype)
    safe = norm_prod + constant(1.0 - nonzero)
    cosine = mul(dot / safe, constant(nonzero))
    return concat_cols([offsets, dist, cosine])


def pad_weights(target_positions: np.ndarray, target_features: Tensor,
                source: SparseVoxelGrid, neighbors: NeighborList,
                mlp: PadMlp, feature_cues: bool = True) -> Tensor:
    """Per-target softmax weights over the k neighbors; rows sum to 1."""
    t, k = neighbors.indices.shape
    logits = mlp(_pair_descriptors(target_positions, target_features, source,
                                   neighbors, feature_cues))
    logits = reshape(logits, (t, k))
    if (neighbors.counts < k).any():
        # push padded slots far below any real logit before the softmax
        mask = neighbors.indices < 0
        logits = logits + constant(np.where(mask, -1e9, 0.0).astype(logits.data.dtype))
    return softmax_rows(logits)


def pad_features(target_positions: np.ndarray, target_features: Tensor,
                 source: SparseVoxelGrid, mlp: PadMlp, k: int,
                 feature_cues: bool = True) -> Tensor:
    """Synthesize a feature row per target as the weighted sum of k source rows."""
    if source.n_voxels == 0:
        raise ValueError("pad_features requires a non-empty source grid")
    neighbors = knn(target_positions, source, k)
    weights = pad_weights(target_positions, target_features, source, neighbors,
                          mlp, feature_cues)
    t, kk = neighbors.indices.shape
    src_rows = gather_rows(source.features, neighbors.indices.reshape(-1))   # (T*k, d)
    weighted = mul(src_rows, reshape(weights, (t * kk, 1)))
    seg = np.repeat(np.arange(t, dtype=np.int64), kk)
    # segments all have exactly kk members, so mean * kk is an exact sum
    return mul(segment_mean(weighted, seg, t), float(kk))


def adaptive_pad(memory: SparseVoxelGrid, obs: SparseVoxelGrid,
                 params: PaddingParams) -> PaddedPair:
    """Complete both grids onto the sorted union of their coordinates.

    Memory gains synthesized rows at coordinates only the observation has
    (weighted from memory neighbors); the observation gains rows at
    memory-only coordinates (weighted from observation neighbors). An empty
    source on either side falls back to zero rows.
    """
    if memory.voxel_size != obs.voxel_size:
        raise ValueError(
            f"voxel size mismatch: memory {memory.voxel_size} vs observation {obs.voxel_size}")
    v = obs.voxel_size
    _, obs_only, mem_only = partition(memory, obs)

    mem_aug = _augment(memory, obs_only, obs, params.into_memory, params, v)
    obs_aug = _augment(obs, mem_only, memory, params.into_observation, params, v)

    union_keys = np.union1d(memory.keys, obs.keys)
    mem_grid = _reorder(mem_aug, union_keys, v)
    obs_grid = _reorder(obs_aug, union_keys, v)
    return PaddedPair(memory=mem_grid, observation=obs_grid)


def _augment(base: SparseVoxelGrid, new_coords: np.ndarray,
             feature_donor: SparseVoxelGrid, mlp: PadMlp,
             params: "PaddingParams", v: float):
    """Rows of ``base`` plus synthesized rows at ``new_coords``."""
    if len(new_coords) == 0:
        return base.coords, base.features, base.keys
    if base.n_voxels == 0 or params.mode == "zero":
        width = base.features.data.shape[1]
        new_feats = constant(np.zeros((len(new_coords), width),
                                      dtype=base.features.data.dtype))
    else:
        centers = (new_coords.astype(np.float64) + 0.5) * v
        donor_rows = feature_donor.lookup(new_coords)
        target_feats = gather_rows(feature_donor.features, donor_rows)
        new_feats = pad_features(centers, target_feats, base, mlp, params.k,
                                 feature_cues=(params.mode == "adaptive"))
    coords = np.concatenate([base.coords, new_coords.astype(np.int32)], axis=0)
    feats = concat_rows([base.features, new_feats])
    keys = np.concatenate([base.keys, pack_keys(new_coords)])
    return coords, feats, keys


def _reorder(aug, union_keys: np.ndarray, v: float) -> SparseVoxelGrid:
    coords, feats, keys = aug
    order = np.argsort(keys, kind="stable")
    return SparseVoxelGrid(v, coords[order], gather_rows(feats, order),
                           keys=keys[order])

"""Point clouds, sparse voxel grids, deterministic voxelization and exact kNN.

Voxel indexing is floor-based with half-open cells: a point p maps to voxel
floor(p / v) per axis, i.e. cell [n*v, (n+1)*v). Grids keep their rows in
lexicographic (x, y, z) coordinate order, which doubles as the deterministic
tie-break order everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, constant, segment_mean

__all__ = [
    "PointCloudFrame",
    "SparseVoxelGrid",
    "NeighborList",
    "pack_keys",
    "voxelize",
    "point_offsets",
    "re_voxelize",
    "knn",
]

# 21 bits per axis, offset to keep keys nonnegative; |coord| must stay < 2^20
_KEY_OFF = 1 << 20
_KEY_BITS = 21


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Pack integer (x, y, z) triples into sortable int64 keys (x-major)."""
    c = np.asarray(coords, dtype=np.int64)
    if c.size and (np.abs(c) >= _KEY_OFF).any():
        raise ValueError("voxel coordinate magnitude exceeds packing range (2^20)")
    return (((c[:, 0] + _KEY_OFF) << (2 * _KEY_BITS))
            | ((c[:, 1] + _KEY_OFF) << _KEY_BITS)
            | (c[:, 2] + _KEY_OFF))


@dataclass
class PointCloudFrame:
    """One LiDAR sweep in its ego frame."""

    coords: np.ndarray                     # (N, 3) float, meters
    intensity: np.ndarray                  # (N,) float
    labels: np.ndarray | None = None       # (N,) int class ids
    moving_flags: np.ndarray | None = None  # (N,) bool
    frame_index: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("point coordinates must be finite")
        if self.intensity.shape[0] != self.coords.shape[0]:
            raise ValueError("intensity length must match point count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.moving_flags is not None:
            self.moving_flags = np.asarray(self.moving_flags, dtype=bool).reshape(-1)

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]


@dataclass
class SparseVoxelGrid:
    """Occupied voxels only: integer coords plus one feature row each.

    Rows are unique and lexicographically sorted by coordinate; ``keys`` caches
    the packed sort keys so lookups are a binary search.
    """

    voxel_size: float
    coords: np.ndarray          # (M, 3) int32
    features: Tensor            # (M, d)
    keys: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 3)
        if not isinstance(self.features, Tensor):
            self.features = constant(np.asarray(self.features))
        if self.features.data.shape[0] != self.coords.shape[0]:
            raise ValueError("feature row count must match voxel count")
        if self.keys is None:
            self.keys = pack_keys(self.coords)

    @property
    def n_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.features.data.shape[1]

    def centers(self) -> np.ndarray:
        return (self.coords.astype(np.float64) + 0.5) * self.voxel_size

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate, -1 where unoccupied."""
        q = pack_keys(np.asarray(coords).reshape(-1, 3))
        if len(self.keys) == 0:
            return np.full(len(q), -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.keys, q), len(self.keys) - 1)
        return np.where(self.keys[pos] == q, pos, -1).astype(np.int64)


@dataclass
class NeighborList:
    """k nearest source entries per query, ascending distance.

    ``indices`` is (Q, k) into the source rows with -1 padding when the source
    has fewer than k entries; ``offsets`` holds source_position - query_position.
    Ties are broken by source row order (lexicographic voxel key for grids,
    point index for raw point sets).
    """

    indices: np.ndarray   # (Q, k) int64
    offsets: np.ndarray   # (Q, k, 3) float64
    counts: np.ndarray    # (Q,) int64, valid entries per query


def _sorted_unique_voxels(positions: np.ndarray, voxel_size: float):
    idx = np.floor(positions / voxel_size).astype(np.int64)
    keys = pack_keys(idx)
    uniq_keys, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    coords = idx[first].astype(np.int32)
    return coords, inverse, uniq_keys


def voxelize(features, positions: np.ndarray, voxel_size: float):
    """Average features of points sharing a voxel.

    Returns (SparseVoxelGrid, point_to_voxel) where point_to_voxel[i] is the
    grid row containing point i. Accumulation runs in ascending point order,
    so the result is bit-reproducible.
    """
    if voxel_size <= 0:
        raise ValueError("voxel size must be positive")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    feats = features if isinstance(features, Tensor) else constant(np.asarray(features))
    if feats.data.shape[0] != positions.shape[0]:
        raise ValueError("feature rows must match position rows")
    coords, inverse, keys = _sorted_unique_voxels(positions, voxel_size)
    pooled = segment_mean(feats, inverse, len(keys))
    grid = SparseVoxelGrid(voxel_size, coords, pooled, keys=keys)
    return grid, inverse


def point_offsets(positions: np.ndarray, grid: SparseVoxelGrid,
                  point_to_voxel: np.ndarray | None = None) -> np.ndarray:
    """Offset of each point from its voxel center, components in [-v/2, v/2)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    v = grid.voxel_size
    if point_to_voxel is None:
        rows = grid.lookup(np.floor(positions / v).astype(np.int64))
        if (rows < 0).any():
            bad = int(np.flatnonzero(rows < 0)[0])
            raise ValueError(f"point {bad} falls outside the occupied grid")
        point_to_voxel = rows
    centers = (grid.coords[point_to_voxel].astype(np.float64) + 0.5) * v
    return positions - centers


def re_voxelize(grid: SparseVoxelGrid, positions: np.ndarray, voxel_size: float) -> SparseVoxelGrid:
    """Re-bin existing voxel features at metric ``positions``; collisions average."""
    if positions.shape[0] != grid.n_voxels:
        raise ValueError("positions must align with grid rows")
    new_grid, _ = voxelize(grid.features, positions, voxel_size)
    return new_grid


def _source_positions(source) -> np.ndarray:
    if isinstance(source, SparseVoxelGrid):
        return source.centers()
    return np.asarray(source, dtype=np.float64).reshape(-1, 3)


def knn(queries: np.ndarray, source, k: int, exclude_self: bool = False,
        work_dtype=np.float64) -> NeighborList:
    """Exact k nearest neighbors by Euclidean distance, deterministic ties.

    ``source`` is a SparseVoxelGrid (distances to voxel centers) or an (M, 3)
    point array. With ``exclude_self`` a source entry at exactly the query
    position is skipped (used for point neighborhoods around each point).
    ``work_dtype=np.float32`` halves the distance-matrix cost where float64
    ordering of near-ties is not required (e.g. regularizer neighborhoods).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    queries = np.asarray(queries, dtype=work_dtype).reshape(-1, 3)
    src = _source_positions(source).astype(work_dtype, copy=False)
    m = src.shape[0]
    if m == 0:
        raise ValueError("knn source is empty")
    q = queries.shape[0]
    indices = np.full((q, k), -1, dtype=np.int64)
    counts = np.zeros(q, dtype=np.int64)
    chunk = max(1, int(4e6 // max(m, 1)))
    src_sq = (src * src).sum(axis=1)
    neg2_src_t = np.ascontiguousarray(-2.0 * src.T)
    for lo in range(0, q, chunk):
        hi = min(q, lo + chunk)
        qs = queries[lo:hi]
        d2 = qs @ neg2_src_t
        d2 += src_sq[None, :]
        d2 += (qs * qs).sum(axis=1)[:, None]
        np.maximum(d2, 0.0, out=d2)
        if exclude_self:
            eq = (src[None, :, 0] == qs[:, 0, None]) \
                & (src[None, :, 1] == qs[:, 1, None]) \
                & (src[None, :, 2] == qs[:, 2, None])
            d2[eq] = np.inf
            avail = m - eq.sum(axis=1)
        else:
            avail = np.full(hi - lo, m, dtype=np.int64)
        kk = np.minimum(k, avail)
        handled = np.zeros(hi - lo, dtype=bool)
        if m > k:
            # fast path: rows whose top-k distances are all distinct and whose
            # k-th distance is strictly below the rest (no ties to break)
            cand = np.argpartition(d2, k - 1, axis=1)[:, :k]
            d_c = np.take_along_axis(d2, cand, axis=1)
            order = np.argsort(d_c, axis=1)
            picked = np.take_along_axis(cand, order, axis=1)
            dsorted = np.take_along_axis(d_c, order, axis=1)
            distinct = (np.diff(dsorted, axis=1) > 0).all(axis=1)
            strict_boundary = (d2 <= dsorted[:, -1:]).sum(axis=1) == k
            easy = distinct & strict_boundary & (kk == k)
            rows = np.flatnonzero(easy)
            indices[lo + rows] = picked[rows]
            counts[lo + rows] = k
            handled[easy] = True
        for r in np.flatnonzero(~handled):
            row = d2[r]
            nk = int(kk[r])
            if nk == 0:
                continue
            if nk < m:
                kth_v = np.partition(row, nk - 1)[nk - 1]
                cand_r = np.flatnonzero(row <= kth_v)
            else:
                cand_r = np.arange(m)
            order_r = cand_r[np.argsort(row[cand_r], kind="stable")][:nk]
            indices[lo + r, :nk] = order_r
            counts[lo + r] = nk
    safe = np.where(indices < 0, 0, indices)
    offsets = src[safe] - queries[:, None, :]
    offsets[indices < 0] = 0.0
    return NeighborList(indices=indices, offsets=offsets, counts=counts)

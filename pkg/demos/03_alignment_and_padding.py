"""Carrying a sparse memory between ego frames: rigid alignment, then
reconciling its coordinate set with the current observation by learned
padding."""

import numpy as np

from mvxseg.padding import PaddingParams, adaptive_pad, partition
from mvxseg.pose import PoseSE3, align_memory
from mvxseg.voxel import voxelize

rng = np.random.default_rng(2)

# yesterday's memory: an L-shaped wall scanned from the old ego position
wall = np.concatenate([
    np.stack([np.linspace(0, 6, 80), np.full(80, 4.0), rng.uniform(0, 2, 80)], 1),
    np.stack([np.full(80, 6.0), np.linspace(4, 9, 80), rng.uniform(0, 2, 80)], 1),
])
memory, _ = voxelize(rng.normal(size=(160, 8)).astype(np.float32), wall, 0.5)
print("memory voxels:", memory.n_voxels)

# the ego drove forward and turned: express the memory in the new frame
pose = PoseSE3.from_yaw(0.15, translation=(-1.2, 0.0, 0.0))
aligned = align_memory(memory, pose)
print("aligned voxels:", aligned.n_voxels, "(collisions only ever merge)")

# today's observation covers a partially different region
obs_pts = wall + np.array([0.8, 0.3, 0.0]) + rng.normal(0, 0.05, wall.shape)
obs, _ = voxelize(rng.normal(size=(160, 8)).astype(np.float32),
                  pose.apply(obs_pts), 0.5)

shared, obs_only, mem_only = partition(aligned, obs)
print(f"shared {len(shared)}, new-in-observation {len(obs_only)}, "
      f"memory-only {len(mem_only)}")

params = PaddingParams.create(rng, k=5)
pair = adaptive_pad(aligned, obs, params)
print("padded pair voxels:", pair.memory.n_voxels, "==", pair.observation.n_voxels)
print("row-aligned coordinate lists:",
      np.array_equal(pair.memory.coords, pair.observation.coords))

# each synthesized row is a convex combination of its neighborhood
row = pair.memory.features.data[-1]
print("a synthesized memory row:", row[:4].round(3), "...")

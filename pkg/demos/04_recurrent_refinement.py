"""The gated memory refinement: how the update gate trades off the previous
memory against the new observation, shown with forced gate biases."""

import numpy as np

from mvxseg.sparseconv import GruParams, gru_update
from mvxseg.voxel import SparseVoxelGrid, pack_keys

rng = np.random.default_rng(3)
coords = np.unique(rng.integers(-3, 4, size=(60, 3)), axis=0).astype(np.int32)
coords = coords[np.argsort(pack_keys(coords))]
obs = SparseVoxelGrid(0.5, coords, rng.normal(size=(len(coords), 8)).astype(np.float32))
mem = SparseVoxelGrid(0.5, coords, (3.0 * rng.normal(size=(len(coords), 8))).astype(np.float32))

params = GruParams.create(rng, d_m=8)
out = gru_update(obs, mem, params)
print("refined memory keeps the coordinate set:",
      np.array_equal(out.coords, coords))
print("component bound max(1, |mem|):",
      np.abs(out.features.data).max() <= max(1.0, np.abs(mem.features.data).max()))


def force(gate, value):
    gate.conv_out.kernel.data = np.zeros_like(gate.conv_out.kernel.data)
    gate.conv_out.bias.data = np.full_like(gate.conv_out.bias.data, value)


# update gate forced shut: the memory passes through unchanged
frozen = GruParams.create(np.random.default_rng(4), d_m=8)
force(frozen.update_gate, -50.0)
kept = gru_update(obs, mem, frozen)
print("z=0 drift from previous memory:",
      float(np.abs(kept.features.data - mem.features.data).max()))

# update gate forced open: the candidate (tanh output) replaces it entirely
fresh = GruParams.create(np.random.default_rng(5), d_m=8)
force(fresh.update_gate, 50.0)
replaced = gru_update(obs, mem, fresh)
print("z=1 output magnitude (inside tanh range):",
      float(np.abs(replaced.features.data).max()))

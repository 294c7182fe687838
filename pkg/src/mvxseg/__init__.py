"""Streaming LiDAR semantic segmentation with a sparse 3D latent memory.

numpy-backed: a small deterministic autodiff engine drives a sparse voxel
network that carries learned embeddings across frames, plus the synthetic
scene harness, losses, training loop and evaluation used to exercise it.
"""

from .tensor import (Tensor, no_grad, constant, parameter, backward,
                     adamw_step, AdamWState, BatchNorm)
from .voxel import (PointCloudFrame, SparseVoxelGrid, NeighborList,
                    voxelize, re_voxelize, point_offsets, knn)
from .pose import PoseSE3, compose, invert, align_memory
from .padding import PaddingParams, PaddedPair, partition, adaptive_pad
from .sparseconv import (SparseConvLayer, sparse_conv, sparse_transpose_conv,
                         GruParams, gru_update)
from .network import (NetworkConfig, NetworkParams, StreamState, init_params,
                      encode, update_memory, decode, fuse_motion, step)
from .losses import (LossConfig, weighted_ce, lovasz_softmax, smoothness_reg,
                     total_loss)

__version__ = "0.1.0"

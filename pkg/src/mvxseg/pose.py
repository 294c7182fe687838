"""Rigid SE(3) poses and ego-motion compensation of the latent memory."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel import SparseVoxelGrid, re_voxelize

__all__ = ["PoseSE3", "compose", "invert", "align_memory"]


@dataclass(frozen=True)
class PoseSE3:
    """Rotation + translation; maps points as R @ p + t."""

    rotation: np.ndarray    # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant must be +1")

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(yaw: float, translation=(0.0, 0.0, 0.0)) -> "PoseSE3":
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return PoseSE3(rot, np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def is_identity(self) -> bool:
        return (np.array_equal(self.rotation, np.eye(3))
                and np.array_equal(self.translation, np.zeros(3)))


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Pose applying b first, then a: (a o b)(p) = a(b(p))."""
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: PoseSE3) -> PoseSE3:
    rt = a.rotation.T
    return PoseSE3(rt, -rt @ a.translation)


def align_memory(memory: SparseVoxelGrid, pose: PoseSE3) -> SparseVoxelGrid:
    """Warp the memory grid into the current ego frame.

    Voxel centers are transformed by ``pose`` and re-binned at the same voxel
    size; entries landing in one cell average their features, so the occupied
    count never increases. The identity pose reproduces the grid bit-exactly
    (centers (i + 0.5) * v floor back to i).
    """
    if pose.is_identity():
        return memory
    warped = pose.apply(memory.centers())
    return re_voxelize(memory, warped, memory.voxel_size)

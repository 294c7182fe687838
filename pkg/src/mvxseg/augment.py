"""Sequence-consistent augmentation and instance injection.

One sampled similarity transform (global scale, yaw, translation) is applied
to every frame of a sequence and conjugated into the relative poses, so the
augmented stream stays geometrically consistent. Instance cutMix pastes
labeled object point sets from a library onto random ground locations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .pose import PoseSE3
from .scene import SequenceData
from .voxel import PointCloudFrame

__all__ = ["SequenceTransform", "sample_transform", "augment_sequence",
           "InstanceLibrary", "build_instance_library", "instance_cutmix"]


@dataclass(frozen=True)
class SequenceTransform:
    """p -> scale * R_yaw(p) + translation, applied to every frame alike."""

    scale: float = 1.0
    yaw: float = 0.0
    translation: tuple = (0.0, 0.0, 0.0)

    @staticmethod
    def identity() -> "SequenceTransform":
        return SequenceTransform()

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * (pts @ self.rotation().T) + np.asarray(self.translation)

    def conjugate_pose(self, pose: PoseSE3) -> PoseSE3:
        """The relative pose the transformed stream obeys: A o T o A^-1."""
        r = self.rotation()
        tau = np.asarray(self.translation, dtype=np.float64)
        rot = r @ pose.rotation @ r.T
        trans = tau + self.scale * (r @ pose.translation) - rot @ tau
        return PoseSE3(rot, trans)


def sample_transform(rng: np.random.Generator,
                     scale_range=(0.80, 1.20),
                     translation_range=(0.0, 0.2),
                     yaw_range=(-np.pi, np.pi)) -> SequenceTransform:
    return SequenceTransform(
        scale=float(rng.uniform(*scale_range)),
        yaw=float(rng.uniform(*yaw_range)),
        translation=tuple(rng.uniform(*translation_range, size=3)),
    )


def augment_sequence(seq: SequenceData, transform: SequenceTransform) -> SequenceData:
    """Transformed copy of a sequence; labels, flags and ids are untouched."""
    if transform == SequenceTransform.identity():
        return seq
    frames = [PointCloudFrame(transform.apply_points(f.coords),
                              f.intensity.copy(), labels=f.labels,
                              moving_flags=f.moving_flags,
                              frame_index=f.frame_index)
              for f in seq.frames]
    poses = [seq.relative_poses[0]]
    poses += [transform.conjugate_pose(p) for p in seq.relative_poses[1:]]
    return SequenceData(frames=frames, relative_poses=poses,
                        ego_poses=seq.ego_poses, object_ids=seq.object_ids,
                        visibility=seq.visibility,
                        object_classes=seq.object_classes)


@dataclass
class Instance:
    points: np.ndarray       # relative to the footprint anchor (base center)
    intensity: np.ndarray
    cls: int
    moving: bool


@dataclass
class InstanceLibrary:
    instances: list = field(default_factory=list)

    def __len__(self):
        return len(self.instances)

    def class_counts(self) -> dict:
        counts = {}
        for inst in self.instances:
            counts[inst.cls] = counts.get(inst.cls, 0) + 1
        return counts


def build_instance_library(sequences, classes, min_points: int = 15) -> InstanceLibrary:
    """Collect per-object point sets of the given classes from a dataset.

    Points are stored relative to the object's footprint center (xy centroid,
    minimum z), so injection can drop them onto any ground cell.
    """
    lib = InstanceLibrary()
    for seq in sequences:
        for frame, ids in zip(seq.frames, seq.object_ids):
            for obj in np.unique(ids[ids >= 0]):
                if seq.object_classes[obj] not in classes:
                    continue
                sel = ids == obj
                if sel.sum() < min_points:
                    continue
                pts = frame.coords[sel]
                anchor = np.array([pts[:, 0].mean(), pts[:, 1].mean(),
                                   pts[:, 2].min()])
                lib.instances.append(Instance(
                    points=pts - anchor, intensity=frame.intensity[sel].copy(),
                    cls=int(seq.object_classes[obj]),
                    moving=bool(frame.moving_flags[sel].any())))
    return lib


def instance_cutmix(frame: PointCloudFrame, library: InstanceLibrary,
                    rng: np.random.Generator, count: int = 5,
                    ground_class: int = 0) -> PointCloudFrame:
    """Inject ``count`` library instances onto random ground points.

    Sampling favors rare classes (inverse library frequency). An empty library
    warns and returns the frame unchanged.
    """
    if count == 0:
        return frame
    if len(library) == 0:
        warnings.warn("instance cutmix: empty library, frame unchanged")
        return frame
    ground = np.flatnonzero(frame.labels == ground_class)
    if len(ground) == 0:
        return frame
    counts = library.class_counts()
    weights = np.array([1.0 / counts[inst.cls] for inst in library.instances])
    weights /= weights.sum()
    picks = rng.choice(len(library), size=count, p=weights)
    coords = [frame.coords]
    intensity = [frame.intensity]
    labels = [frame.labels]
    moving = [frame.moving_flags if frame.moving_flags is not None
              else np.zeros(frame.n_points, bool)]
    for i in picks:
        inst = library.instances[i]
        anchor = frame.coords[rng.choice(ground)]
        coords.append(inst.points + anchor)
        intensity.append(inst.intensity)
        labels.append(np.full(len(inst.points), inst.cls, dtype=np.int64))
        moving.append(np.full(len(inst.points), inst.moving))
    return PointCloudFrame(np.vstack(coords), np.concatenate(intensity),
                           labels=np.concatenate(labels),
                           moving_flags=np.concatenate(moving),
                           frame_index=frame.frame_index)

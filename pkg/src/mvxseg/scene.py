"""Synthetic LiDAR sequences by ray casting box-world scenes.

A scene is a ground plane plus axis-aligned-ish boxes (walls, parked props,
one or more moving actors) scanned by a spinning multi-beam sensor mounted on
a moving ego vehicle. Occlusion falls out of first-hit ray casting, which is
exactly the phenomenon the latent memory is supposed to bridge. Everything is
deterministic given the spec's seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pose import PoseSE3, compose, invert
from .voxel import PointCloudFrame

__all__ = ["BoxSpec", "SyntheticSceneSpec", "SequenceData", "generate_sequence",
           "benchmark_scene_specs"]


@dataclass
class BoxSpec:
    """A box obstacle; moving boxes translate by velocity per frame."""

    center: tuple
    size: tuple
    cls: int
    yaw: float = 0.0
    moving: bool = False
    velocity: tuple = (0.0, 0.0, 0.0)

    def center_at(self, t: int) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.moving:
            c = c + np.asarray(self.velocity, dtype=np.float64) * t
        return c


@dataclass
class SyntheticSceneSpec:
    ground_extent: float = 20.0
    ground_class: int = 0
    boxes: list = field(default_factory=list)
    ego_start: tuple = (0.0, 0.0, 0.0)
    ego_velocity: tuple = (0.0, 0.0, 0.0)
    ego_yaw_rate: float = 0.0
    sensor_height: float = 1.6
    n_azimuth: int = 180
    n_elevation: int = 12
    elevation_range: tuple = (-0.35, 0.05)   # radians
    max_range: float = 35.0
    min_range: float = 0.5
    noise_sigma: float = 0.0
    intensity_by_class: dict = field(default_factory=dict)
    n_frames: int = 30
    seed: int = 0

    @property
    def rays_per_frame(self) -> int:
        return self.n_azimuth * self.n_elevation


@dataclass
class SequenceData:
    """Frames in their ego frames plus the pose chain and per-object bookkeeping."""

    frames: list
    relative_poses: list          # T(t-1 -> t); index 0 is the identity
    ego_poses: list               # ego -> world per frame
    object_ids: list              # per frame: (N,) int, -1 for ground
    visibility: np.ndarray        # (n_frames, n_objects) point counts
    object_classes: np.ndarray    # (n_objects,)

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def _ray_directions(spec: SyntheticSceneSpec, yaw: float) -> np.ndarray:
    az = yaw + np.linspace(0.0, 2 * np.pi, spec.n_azimuth, endpoint=False)
    el = np.linspace(spec.elevation_range[0], spec.elevation_range[1],
                     spec.n_elevation)
    azg, elg = np.meshgrid(az, el, indexing="ij")
    cos_el = np.cos(elg)
    dirs = np.stack([np.cos(azg) * cos_el, np.sin(azg) * cos_el, np.sin(elg)],
                    axis=-1)
    return dirs.reshape(-1, 3)


def _intersect_ground(origin, dirs, extent):
    """Distance to z = 0 inside the square extent, inf on miss."""
    t = np.full(len(dirs), np.inf)
    down = dirs[:, 2] < -1e-9
    t_hit = -origin[2] / dirs[down, 2]
    pts = origin[None, :] + t_hit[:, None] * dirs[down]
    inside = (np.abs(pts[:, 0]) <= extent) & (np.abs(pts[:, 1]) <= extent)
    vals = np.where(inside, t_hit, np.inf)
    t[down] = vals
    return t


def _intersect_box(origin, dirs, center, size, yaw):
    """Slab intersection with a yawed box, inf on miss."""
    c, s = np.cos(-yaw), np.sin(-yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot @ (origin - center)
    d = dirs @ rot.T
    half = np.asarray(size, dtype=np.float64) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half[None, :] - o[None, :]) * inv
        t2 = (half[None, :] - o[None, :]) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(hit, np.where(tmin > 0, tmin, np.inf), np.inf)
    return t


def generate_sequence(spec: SyntheticSceneSpec) -> SequenceData:
    """Ray-cast the scene once per frame; first hit wins.

    Points come out in the ego (sensor) frame with per-point class labels,
    moving flags and object ids (-1 for ground). Raises if any frame ends up
    empty.
    """
    frames, rel_poses, ego_poses, object_ids = [], [], [], []
    n_obj = len(spec.boxes)
    visibility = np.zeros((spec.n_frames, n_obj), dtype=np.int64)
    default_intensity = {spec.ground_class: 0.3}

    for t in range(spec.n_frames):
        rng = np.random.default_rng([spec.seed, t])
        ego_pos = (np.asarray(spec.ego_start, dtype=np.float64)
                   + np.asarray(spec.ego_velocity, dtype=np.float64) * t)
        yaw = spec.ego_yaw_rate * t
        origin = ego_pos + np.array([0.0, 0.0, spec.sensor_height])
        pose = PoseSE3.from_yaw(yaw, origin)
        dirs = _ray_directions(spec, yaw)

        best_t = _intersect_ground(origin, dirs, spec.ground_extent)
        best_obj = np.full(len(dirs), -1, dtype=np.int64)
        for i, box in enumerate(spec.boxes):
            tb = _intersect_box(origin, dirs, box.center_at(t), box.size, box.yaw)
            closer = tb < best_t
            best_t = np.where(closer, tb, best_t)
            best_obj[closer] = i

        valid = np.isfinite(best_t) & (best_t >= spec.min_range) \
            & (best_t <= spec.max_range)
        if not valid.any():
            raise ValueError(f"frame {t}: no rays hit the scene")
        ranges = best_t[valid]
        if spec.noise_sigma > 0:
            ranges = ranges + rng.normal(0.0, spec.noise_sigma, size=len(ranges))
        pts_world = origin[None, :] + ranges[:, None] * dirs[valid]
        obj = best_obj[valid]

        if n_obj:
            box_cls = np.array([b.cls for b in spec.boxes], dtype=np.int64)
            box_mov = np.array([b.moving for b in spec.boxes])
            labels = np.where(obj >= 0, box_cls[np.maximum(obj, 0)],
                              spec.ground_class)
            moving = np.where(obj >= 0, box_mov[np.maximum(obj, 0)], False)
        else:
            labels = np.full(len(obj), spec.ground_class, dtype=np.int64)
            moving = np.zeros(len(obj), dtype=bool)
        lookup = {**default_intensity, **spec.intensity_by_class}
        base = np.array([lookup.get(int(c), 0.5) for c in labels])
        intensity = np.clip(base + rng.normal(0.0, 0.02, size=len(base)), 0.0, 1.0)

        pts_ego = invert(pose).apply(pts_world)
        frames.append(PointCloudFrame(pts_ego, intensity, labels=labels,
                                      moving_flags=moving, frame_index=t))
        object_ids.append(obj)
        if n_obj:
            visibility[t] = np.bincount(obj[obj >= 0], minlength=n_obj)
        ego_poses.append(pose)
        rel_poses.append(PoseSE3.identity() if t == 0
                         else compose(invert(pose), ego_poses[t - 1]))

    classes = np.array([b.cls for b in spec.boxes], dtype=np.int64)
    return SequenceData(frames=frames, relative_poses=rel_poses,
                        ego_poses=ego_poses, object_ids=object_ids,
                        visibility=visibility, object_classes=classes)


def benchmark_scene_specs(n_sequences: int = 3, n_frames: int = 30,
                          seed: int = 0, rays: tuple = (168, 30),
                          noise_sigma: float = 0.02) -> list:
    """The seeded desk benchmark: ground / walls / parked boxes / one moving box.

    Parked and moving boxes share their geometry, so telling class 2 from
    class 3 genuinely requires temporal context. One wall sits between the ego
    path and the moving actor's path, occluding it for a stretch of frames.
    """
    specs = []
    for s in range(n_sequences):
        rng = np.random.default_rng([seed, 991, s])
        boxes = [
            # perimeter walls (class 1)
            BoxSpec(center=(0.0, 13.0, 1.25), size=(34.0, 0.4, 2.5), cls=1),
            BoxSpec(center=(0.0, -13.0, 1.25), size=(34.0, 0.4, 2.5), cls=1),
            BoxSpec(center=(15.0, 0.0, 1.25), size=(0.4, 26.0, 2.5), cls=1),
            BoxSpec(center=(-15.0, 0.0, 1.25), size=(0.4, 26.0, 2.5), cls=1),
            # occluder wall between ego lane and actor lane (class 1)
            BoxSpec(center=(float(rng.uniform(-1.0, 1.0)), 2.2, 1.1),
                    size=(7.0, 0.3, 2.2), cls=1),
        ]
        # parked boxes (class 2), the same body as the mover: per frame the
        # two classes are geometrically indistinguishable
        body = (4.6, 2.0, 1.7)
        for _ in range(3):
            boxes.append(BoxSpec(
                center=(float(rng.uniform(-12, 12)), float(rng.uniform(-11, -5)), 0.85),
                size=body, cls=2, yaw=float(rng.uniform(-np.pi, np.pi))))
        boxes.append(BoxSpec(
            center=(float(rng.uniform(-13, -9)), 4.2, 0.85), size=body, cls=2,
            yaw=0.0))
        # the moving actor (class 3) drives along the lane behind the occluder
        boxes.append(BoxSpec(center=(-9.5, 4.2, 0.85), size=body, cls=3,
                             moving=True, velocity=(0.85, 0.0, 0.0)))
        specs.append(SyntheticSceneSpec(
            ground_extent=15.0, boxes=boxes,
            ego_start=(-5.0, -1.5, 0.0), ego_velocity=(0.4, 0.0, 0.0),
            n_azimuth=rays[0], n_elevation=rays[1],
            elevation_range=(-0.45, 0.10), max_range=34.0,
            noise_sigma=noise_sigma, n_frames=n_frames,
            intensity_by_class={0: 0.3, 1: 0.5, 2: 0.62, 3: 0.62},
            seed=seed * 7919 + s))
    return specs

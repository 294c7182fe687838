"""Two-phase training: single-frame pretraining of the whole network, then
recurrent refinement with the encoder frozen.

Phase 2 rolls the memory through a warmup prefix without gradient recording
and backpropagates through time across the next few frames only, so the graph
stays small while the memory enters the window in a realistic state.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import (InstanceLibrary, build_instance_library, instance_cutmix,
                      sample_transform, augment_sequence)
from .losses import LossConfig, total_loss
from .network import (NetworkConfig, NetworkParams, StreamState, decode,
                      encode, fuse_motion, init_params, observation_grid,
                      update_memory)
from .voxel import knn

__all__ = ["TrainConfig", "TrainResult", "train", "trainable_parameters"]


@dataclass
class TrainConfig:
    phase1_epochs: int = 4
    phase2_epochs: int = 3
    warmup_frames: int = 10
    bptt_frames: int = 3
    lr: float = 0.003
    lr_decay: float = 0.9
    weight_decay: float = 0.01
    cutmix_count: int = 5
    augment: bool = True
    seed: int = 0
    window_gap: int = 0        # no-grad frames skipped between gradient windows
    grad_clip: float = 5.0     # global-norm clip; 0 disables

    def __post_init__(self):
        if self.warmup_frames < 0 or self.bptt_frames < 1 or self.window_gap < 0:
            raise ValueError("warmup/gap must be >= 0 and bptt >= 1")


@dataclass
class TrainResult:
    params: NetworkParams                # after both phases
    sfb_params: NetworkParams            # snapshot at the end of phase 1
    phase1_losses: list = field(default_factory=list)
    phase2_losses: list = field(default_factory=list)
    wall_seconds: float = 0.0


def trainable_parameters(params: NetworkParams, freeze_encoder: bool) -> dict:
    named = dict(T.named_tensors(params))
    if freeze_encoder:
        named = {k: v for k, v in named.items() if not k.startswith("encoder")}
    return named


def _reg_neighbors(frame, loss_config):
    if loss_config.beta_reg <= 0 or frame.n_points < 2:
        return None
    return knn(frame.coords, frame.coords,
               k=min(loss_config.reg_neighbors, frame.n_points - 1),
               exclude_self=True, work_dtype=np.float32)


def _frame_loss(params, config, loss_config, frame, read_grid, enc,
                neighbors=None):
    if neighbors is None:
        neighbors = _reg_neighbors(frame, loss_config)
    sem, motion = decode(read_grid, enc.point_embeddings, frame, params, config,
                         training=True)
    final = None
    if config.movable_classes:
        final = fuse_motion(sem, motion, config.movable_classes, config.num_classes)
    return total_loss(sem, motion if config.movable_classes else None,
                      frame.labels, frame.moving_flags, loss_config,
                      neighbors=neighbors,
                      movable_classes=config.movable_classes,
                      final_logits=final)


def _abort_on_nan(loss_value: float, context: str, recent: list):
    if not np.isfinite(loss_value):
        raise FloatingPointError(
            f"non-finite loss during {context}; last losses: {recent[-5:]}")


def _clip_gradients(grads: dict, max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                        for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def train(dataset, net_config: NetworkConfig, train_config: TrainConfig,
          loss_config: LossConfig,
          params: NetworkParams | None = None) -> TrainResult:
    """Run both phases over a list of sequences; deterministic given the seed."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    t_start = time.perf_counter()
    rng = np.random.default_rng(train_config.seed)
    if params is None:
        params = init_params(net_config, seed=train_config.seed)

    movable = set(net_config.movable_classes) | {
        int(c) for seq in dataset for c in np.unique(seq.object_classes)
        if c != 0}
    library = build_instance_library(dataset, classes=movable) \
        if train_config.cutmix_count > 0 else InstanceLibrary()

    phase1_losses = _phase1(dataset, params, net_config, train_config,
                            loss_config, library, rng)
    sfb_params = copy.deepcopy(params)
    phase2_losses = _phase2(dataset, params, net_config, train_config,
                            loss_config, rng)
    if train_config.phase2_epochs > 0:
        recalibrate_norm_stats(params, dataset, net_config)
    return TrainResult(params=params, sfb_params=sfb_params,
                       phase1_losses=phase1_losses,
                       phase2_losses=phase2_losses,
                       wall_seconds=time.perf_counter() - t_start)


def recalibrate_norm_stats(params: NetworkParams, dataset,
                           net_config: NetworkConfig) -> None:
    """Settle memory-path and decoder normalization statistics on full
    unrolls of the final parameters.

    Phase 2 optimizes against batch statistics of memory features whose
    distribution depends on how old the memory is; one no-grad pass in
    training mode re-estimates the running stats over whole sequences so
    frozen-stat inference sees the distribution it will actually face.
    The frozen encoder stays in inference mode throughout.
    """
    from .network import decode

    with T.no_grad():
        for seq in dataset:
            stream = StreamState()
            for t, frame in enumerate(seq.frames):
                enc = encode(frame, params, net_config, training=False)
                stream = update_memory(stream, enc.coarse,
                                       seq.relative_poses[t], params,
                                       net_config, training=True)
                decode(stream.memory, enc.point_embeddings, frame, params,
                       net_config, training=True)


def _phase1(dataset, params, net_config, train_config, loss_config, library, rng):
    named = trainable_parameters(params, freeze_encoder=False)
    state = T.AdamWState()
    losses = []
    for epoch in range(train_config.phase1_epochs):
        lr = train_config.lr * train_config.lr_decay ** epoch
        order = [(s, t) for s in range(len(dataset))
                 for t in range(dataset[s].n_frames)]
        rng.shuffle(order)
        for s, t in order:
            frame = dataset[s].frames[t]
            if train_config.augment:
                tf = sample_transform(rng)
                frame = augment_sequence(_single(dataset[s], t), tf).frames[0]
            if train_config.cutmix_count > 0 and len(library):
                frame = instance_cutmix(frame, library, rng,
                                        count=train_config.cutmix_count)
            enc = encode(frame, params, net_config, training=True)
            obs = observation_grid(enc.coarse, net_config)
            loss = _frame_loss(params, net_config, loss_config, frame, obs, enc)
            _abort_on_nan(float(loss.data), f"phase 1 epoch {epoch}", losses)
            grads = T.backward(loss, named)
            _clip_gradients(grads, train_config.grad_clip)
            if lr > 0:
                T.adamw_step(named, grads, state, lr=lr,
                             weight_decay=train_config.weight_decay)
            losses.append(float(loss.data))
    return losses


def _single(seq, t):
    """One-frame view of a sequence (keeps augment_sequence reusable)."""
    from .scene import SequenceData
    return SequenceData(frames=[seq.frames[t]],
                        relative_poses=[seq.relative_poses[0]],
                        ego_poses=[seq.ego_poses[t]],
                        object_ids=[seq.object_ids[t]],
                        visibility=seq.visibility,
                        object_classes=seq.object_classes)


def _detach_state(stream: StreamState) -> StreamState:
    """Truncate BPTT: carry the memory values, drop the graph behind them."""
    from .voxel import SparseVoxelGrid
    if stream.memory is None:
        return stream
    mem = stream.memory
    return StreamState(memory=SparseVoxelGrid(mem.voxel_size, mem.coords,
                                              mem.features.detach(),
                                              keys=mem.keys),
                       frame_count=stream.frame_count,
                       cumulative_pose=stream.cumulative_pose)


def _phase2(dataset, params, net_config, train_config, loss_config, rng):
    """Truncated BPTT along each sequence: the first ``warmup_frames`` sweeps
    roll the memory without recording, then consecutive ``bptt_frames``-sized
    windows backpropagate, detaching the carried state between windows."""
    for name, p in T.named_tensors(params):
        if name.startswith("encoder"):
            p.requires_grad = False
    named = trainable_parameters(params, freeze_encoder=True)
    state = T.AdamWState()
    losses = []
    # neighbor indices are invariant under the similarity augmentations, so
    # regularizer neighborhoods are computed once per raw frame
    nb_cache = {}
    for epoch in range(train_config.phase2_epochs):
        # one decaying schedule spans both phases
        lr = train_config.lr * train_config.lr_decay ** (
            train_config.phase1_epochs + epoch)
        order = list(range(len(dataset)))
        rng.shuffle(order)
        for s in order:
            seq = dataset[s]
            if train_config.augment:
                seq = augment_sequence(seq, sample_transform(rng))
            stream = StreamState()
            t = 0
            with T.no_grad():
                while t < min(train_config.warmup_frames, seq.n_frames):
                    enc = encode(seq.frames[t], params, net_config, training=False)
                    stream = update_memory(stream, enc.coarse,
                                           seq.relative_poses[t],
                                           params, net_config, training=False)
                    t += 1
            while t + train_config.bptt_frames <= seq.n_frames:
                total = T.constant(np.zeros((), dtype=net_config.dtype))
                for u in range(t, t + train_config.bptt_frames):
                    frame = seq.frames[u]
                    if (s, u) not in nb_cache:
                        nb_cache[(s, u)] = _reg_neighbors(dataset[s].frames[u],
                                                          loss_config)
                    enc = encode(frame, params, net_config, training=False)
                    stream = update_memory(stream, enc.coarse,
                                           seq.relative_poses[u],
                                           params, net_config, training=True)
                    total = T.add(total, _frame_loss(params, net_config,
                                                     loss_config, frame,
                                                     stream.memory, enc,
                                                     neighbors=nb_cache[(s, u)]))
                t += train_config.bptt_frames
                loss = T.mul(total, 1.0 / train_config.bptt_frames)
                _abort_on_nan(float(loss.data), f"phase 2 epoch {epoch}", losses)
                grads = T.backward(loss, named)
                _clip_gradients(grads, train_config.grad_clip)
                if lr > 0:
                    T.adamw_step(named, grads, state, lr=lr,
                                 weight_decay=train_config.weight_decay)
                losses.append(float(loss.data))
                stream = _detach_state(stream)
                with T.no_grad():
                    for _ in range(train_config.window_gap):
                        if t >= seq.n_frames:
                            break
                        enc = encode(seq.frames[t], params, net_config,
                                     training=False)
                        stream = update_memory(stream, enc.coarse,
                                               seq.relative_poses[t],
                                               params, net_config,
                                               training=False)
                        t += 1
    for name, p in T.named_tensors(params):
        p.requires_grad = True
    return losses

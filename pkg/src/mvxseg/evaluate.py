"""Streaming evaluation: confusion counts, IoU family, range-binned scores,
occlusion-recovery subset, and test-time augmentation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .augment import SequenceTransform, augment_sequence, sample_transform
from .network import NetworkConfig, NetworkParams, StreamState, step
from .scene import SequenceData

__all__ = ["EvalReport", "confusion_matrix", "iou_from_confusion", "evaluate",
           "tta_evaluate", "final_label_space"]


def confusion_matrix(preds: np.ndarray, labels: np.ndarray, num_classes: int,
                     ignore_id: int | None = None) -> np.ndarray:
    """Rows = ground truth, columns = prediction."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    valid = (labels >= 0) & (labels < num_classes)
    if ignore_id is not None:
        valid &= labels != ignore_id
    flat = labels[valid] * num_classes + preds[valid]
    return np.bincount(flat, minlength=num_classes ** 2).reshape(num_classes,
                                                                 num_classes)


def iou_from_confusion(confusion: np.ndarray):
    """Per-class IoU (nan for absent classes), mIoU over classes with nonzero
    union, and frequency-weighted mIoU."""
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = union > 0
    miou = float(np.nanmean(iou[present])) if present.any() else float("nan")
    freq = confusion.sum(axis=1).astype(np.float64)
    total = freq.sum()
    if total > 0 and present.any():
        w = freq[present] / freq[present].sum()
        fw_miou = float((w * iou[present]).sum())
    else:
        fw_miou = float("nan")
    return iou, miou, fw_miou


@dataclass
class EvalReport:
    num_classes: int
    confusion: np.ndarray
    per_class_iou: np.ndarray
    miou: float
    fw_miou: float
    range_bins: list                     # bin upper edges in meters (last inf)
    range_binned_miou: list              # mIoU per bin
    range_binned_counts: list            # evaluated points per bin
    occlusion_miou: float | None = None  # recently-occluded-object subset
    occlusion_points: int = 0
    per_frame_ms: list = field(default_factory=list)   # wall clock, not part of
                                                       # the canonical metrics
    mode: str = "memory"

    def to_dict(self, include_timing: bool = False) -> dict:
        """JSON-ready content; timing only on request (it is never part of the
        deterministic metrics document)."""
        out = {
            "mode": self.mode,
            "num_classes": self.num_classes,
            "confusion": self.confusion.tolist(),
            "per_class_iou": [None if np.isnan(v) else round(float(v), 10)
                              for v in self.per_class_iou],
            "miou": round(float(self.miou), 10),
            "fw_miou": round(float(self.fw_miou), 10),
            "range_bins": [None if b == np.inf else b for b in self.range_bins],
            "range_binned_miou": [None if np.isnan(v) else round(float(v), 10)
                                  for v in self.range_binned_miou],
            "range_binned_counts": [int(c) for c in self.range_binned_counts],
        }
        if self.occlusion_miou is not None:
            out["occlusion_miou"] = (None if np.isnan(self.occlusion_miou)
                                     else round(float(self.occlusion_miou), 10))
            out["occlusion_points"] = int(self.occlusion_points)
        if include_timing:
            out["per_frame_ms"] = [round(t, 3) for t in self.per_frame_ms]
        return out


def final_label_space(frame, config: NetworkConfig):
    """Ground-truth ids in the decoder's output space (movable classes split
    into static / moving when a motion header is active)."""
    labels = frame.labels.copy()
    movable = sorted(config.movable_classes)
    if movable and frame.moving_flags is not None:
        for j, c in enumerate(movable):
            sel = (frame.labels == c) & frame.moving_flags
            labels[sel] = config.num_classes + j
    return labels


def _recently_occluded_objects(seq: SequenceData, t: int, window: int,
                               threshold: int = 3) -> np.ndarray:
    """Objects visible now but (nearly) invisible in one of the past frames."""
    if t == 0:
        return np.zeros(seq.visibility.shape[1], dtype=bool)
    lo = max(0, t - window)
    was_hidden = (seq.visibility[lo:t] <= threshold).any(axis=0)
    ever_seen = (seq.visibility[:t] > threshold).any(axis=0)
    visible_now = seq.visibility[t] > 0
    return was_hidden & ever_seen & visible_now


def evaluate(params: NetworkParams, config: NetworkConfig, dataset,
             mode: str = "memory", range_bins=(10.0, 20.0, 30.0, np.inf),
             ignore_id: int | None = None, occlusion_window: int = 5,
             score_hook=None) -> EvalReport:
    """Unroll every sequence from its first frame and count predictions.

    ``mode`` is "memory" or "sfb". ``score_hook(seq_idx, frame_idx, scores)``
    may replace the per-point scores (used by TTA averaging).
    """
    if mode not in ("memory", "sfb"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    n_final = config.num_final
    total_conf = np.zeros((n_final, n_final), dtype=np.int64)
    bin_confs = [np.zeros((n_final, n_final), dtype=np.int64) for _ in range_bins]
    occl_conf = np.zeros((n_final, n_final), dtype=np.int64)
    timings = []
    for s, seq in enumerate(dataset):
        state = StreamState()
        for t, frame in enumerate(seq.frames):
            t0 = time.perf_counter()
            res = step(state, frame, seq.relative_poses[t], params, config,
                       sfb=(mode == "sfb"))
            state = res.state
            timings.append((time.perf_counter() - t0) * 1e3)
            scores = res.scores
            if score_hook is not None:
                scores = score_hook(s, t, scores)
            preds = np.argmax(scores, axis=1)
            labels = final_label_space(frame, config)
            total_conf += confusion_matrix(preds, labels, n_final, ignore_id)
            dist = np.linalg.norm(frame.coords, axis=1)
            lo = 0.0
            for b, edge in enumerate(range_bins):
                sel = (dist >= lo) & (dist < edge)
                lo = edge
                if sel.any():
                    bin_confs[b] += confusion_matrix(preds[sel], labels[sel],
                                                     n_final, ignore_id)
            occl = _recently_occluded_objects(seq, t, occlusion_window)
            if occl.any():
                sel = np.isin(seq.object_ids[t], np.flatnonzero(occl))
                if sel.any():
                    occl_conf += confusion_matrix(preds[sel], labels[sel],
                                                  n_final, ignore_id)
    per_class, miou, fw = iou_from_confusion(total_conf)
    bin_mious, bin_counts = [], []
    for conf in bin_confs:
        _, m, _ = iou_from_confusion(conf)
        bin_mious.append(m)
        bin_counts.append(int(conf.sum()))
    occl_miou, occl_pts = None, int(occl_conf.sum())
    if occl_pts > 0:
        _, occl_miou, _ = iou_from_confusion(occl_conf)
    return EvalReport(num_classes=n_final, confusion=total_conf,
                      per_class_iou=per_class, miou=miou, fw_miou=fw,
                      range_bins=list(range_bins), range_binned_miou=bin_mious,
                      range_binned_counts=bin_counts, occlusion_miou=occl_miou,
                      occlusion_points=occl_pts, per_frame_ms=timings, mode=mode)


def tta_evaluate(params: NetworkParams, config: NetworkConfig, dataset,
                 passes: int = 10, seed: int = 0, mode: str = "memory",
                 scale_range=(0.95, 1.05), yaw_range=(-np.pi, np.pi),
                 **eval_kw) -> EvalReport:
    """Average prediction scores over seeded augmented passes.

    Pass 0 is the identity (so a single pass reproduces plain evaluation
    bit-exactly); later passes draw a sequence-consistent yaw + scale.
    """
    rng = np.random.default_rng(seed)
    transforms = [SequenceTransform.identity()]
    for _ in range(passes - 1):
        transforms.append(sample_transform(rng, scale_range=scale_range,
                                           translation_range=(0.0, 0.0),
                                           yaw_range=yaw_range))
    sums: dict = {}
    for tf in transforms:
        augmented = [augment_sequence(seq, tf) for seq in dataset]

        def accumulate(s, t, scores):
            key = (s, t)
            sums[key] = scores if key not in sums else sums[key] + scores
            return scores

        evaluate(params, config, augmented, mode=mode, score_hook=accumulate,
                 **eval_kw)

    def averaged(s, t, scores):
        return sums[(s, t)] / passes

    return evaluate(params, config, dataset, mode=mode, score_hook=averaged,
                    **eval_kw)

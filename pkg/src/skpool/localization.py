"""Weakly supervised instance-level localization.

Training pools instance features into one video logit per clip (or per mixed
pair of clips); inference drops that pool and applies the shared head to
every instance row.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, EvaluationError, ValidationError
from .keypoints import ClipRecord, KeypointCloud
from .network import ModelParams, forward_features, head
from .tensor import Segments, Tensor, concat_rows, mul, segment_max_pool, softmax

MASK_MODES = ("frames", "rows")


@dataclass(frozen=True)
class MixMask:
    """Rows of one sample's instance features selected by the binary mask B."""

    keep: np.ndarray  # bool, one entry per instance row
    lam: float

    @property
    def fraction(self) -> float:
        return float(self.keep.mean()) if self.keep.size else 0.0

    def matrix(self, width: int, complement: bool = False) -> np.ndarray:
        """B (or 1 - B) broadcast across ``width`` channels."""
        rows = ~self.keep if complement else self.keep
        return np.repeat(rows.astype(np.float64)[:, None], width, axis=1)


def sample_lambda(rng: np.random.Generator) -> float:
    # Beta(1, 1), the CutMix default
    return float(rng.uniform(0.0, 1.0))


def sample_mix_mask(frame_of, lam: float | None = None, seed=0, mode: str = "frames") -> MixMask:
    """Mask keeping a contiguous window of round(lam * F) frames.

    ``frame_of`` maps each instance row to its frame position within the clip;
    an int is shorthand for that many rows in distinct frames. ``lam`` is drawn
    uniformly when omitted. In ``rows`` mode exactly round(lam * FI) rows are
    kept, chosen uniformly.
    """
    if mode not in MASK_MODES:
        raise ValidationError(f"mask mode must be one of {MASK_MODES}, got {mode!r}")
    if isinstance(frame_of, (int, np.integer)):
        frame_of = np.arange(int(frame_of))
    frame_of = np.asarray(frame_of, dtype=np.int64)
    if frame_of.size < 1:
        raise ValidationError("cannot mask an empty sample")
    rng = np.random.default_rng(seed)
    if lam is None:
        lam = sample_lambda(rng)
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    if mode == "rows":
        n = frame_of.size
        keep = np.zeros(n, dtype=bool)
        keep[rng.choice(n, size=int(round(lam * n)), replace=False)] = True
        return MixMask(keep, float(lam))
    frames = np.unique(frame_of)
    width = int(round(lam * frames.size))
    start = int(rng.integers(0, frames.size - width + 1))
    kept = frames[start:start + width]
    return MixMask(np.isin(frame_of, kept), float(lam))


def mix_labels(label_a, label_b, lam: float) -> np.ndarray:
    return lam * np.asarray(label_a, dtype=np.float64) + (1.0 - lam) * np.asarray(label_b, dtype=np.float64)


def mixed_pool(feat_a: Tensor, feat_b: Tensor, mask_a: MixMask, mask_b: MixMask) -> Tensor:
    """Channel max over the stacked masked features of two samples (1 x width)."""
    if feat_a.cols != feat_b.cols:
        raise DimensionError(f"feature widths differ: {feat_a.shape} vs {feat_b.shape}")
    if mask_a.keep.size != feat_a.rows or mask_b.keep.size != feat_b.rows:
        raise DimensionError("mask length does not match feature rows")
    xa = mul(feat_a, Tensor(mask_a.matrix(feat_a.cols)))
    xb = mul(feat_b, Tensor(mask_b.matrix(feat_b.cols, complement=True)))
    stacked = concat_rows(xa, xb)
    return segment_max_pool(stacked, Segments.single(stacked.rows))


def mixed_training_logit(feat_a: Tensor, feat_b: Tensor, mask_a: MixMask, mask_b: MixMask,
                         params: ModelParams) -> Tensor:
    """Mixed logit of two samples' nonnegative instance features.

    ``mask_a`` selects the kept rows of sample a; sample b keeps the
    complement of ``mask_b``.
    """
    pooled = mixed_pool(feat_a, feat_b, mask_a, mask_b)
    if pooled.cols != params["head.w"].rows:
        raise DimensionError(f"pooled width {pooled.cols} does not match head {params['head.w'].shape}")
    return head(pooled, params)


def pooled_batch_logits(feats: Tensor, clip_of_row: np.ndarray, num_clips: int,
                        mixes: Sequence[tuple[int, int, MixMask, MixMask]], params: ModelParams):
    """Video logits for a collated batch where some clip pairs are mixed.

    ``mixes`` lists (a, b, mask_a, mask_b) clip pairs; every other clip is
    pooled on its own. Returns the logits and, per output row, the
    (a, b, lam) it came from (b is None for unmixed clips).
    """
    mult = np.ones(feats.rows)
    group = np.full(feats.rows, -1, dtype=np.int64)
    rows_of = [np.flatnonzero(clip_of_row == c) for c in range(num_clips)]
    sources = []
    mixed = set()
    for a, b, ma, mb in mixes:
        g = len(sources)
        mult[rows_of[a]] = ma.keep
        mult[rows_of[b]] = ~mb.keep
        group[rows_of[a]] = g
        group[rows_of[b]] = g
        sources.append((a, b, ma.lam))
        mixed.update((a, b))
    for c in range(num_clips):
        if c not in mixed:
            group[rows_of[c]] = len(sources)
            sources.append((c, None, 1.0))
    if mixes:
        feats = mul(feats, Tensor(np.repeat(mult[:, None], feats.cols, axis=1)))
    pooled = segment_max_pool(feats, Segments(group, len(sources)))
    return head(pooled, params), sources


@dataclass(frozen=True)
class InstancePrediction:
    clip_id: str
    frame_idx: int
    instance_slot: int  # slot id within the clip
    instance_index: int  # position in the frame's instance list
    logits: np.ndarray
    predicted_class: int
    score: float

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "frame_idx": int(self.frame_idx),
            "instance_slot": int(self.instance_slot),
            "instance_index": int(self.instance_index),
            "class": int(self.predicted_class),
            "score": float(self.score),
        }


def instance_logits(cloud: KeypointCloud, params: ModelParams) -> np.ndarray:
    """Head applied to every instance feature row: (FI x C)."""
    feats, _ = forward_features(cloud, params, "localization")
    return head(feats, params).data


def infer_instance_logits(cloud: KeypointCloud, params: ModelParams) -> list[InstancePrediction]:
    logits = instance_logits(cloud, params)
    probs = softmax(logits)
    pred = np.argmax(logits, axis=1)
    clip_of = cloud.clip_of_instance
    first_slot = np.searchsorted(clip_of, np.arange(cloud.num_clips))
    out = []
    for i in range(cloud.num_instances):
        c = int(clip_of[i])
        out.append(InstancePrediction(
            clip_id=cloud.clip_ids[c],
            frame_idx=int(cloud.frame_ids[cloud.frame_of_instance[i]]),
            instance_slot=int(i - first_slot[c]),
            instance_index=int(cloud.instance_index[i]),
            logits=logits[i].copy(),
            predicted_class=int(pred[i]),
            score=float(probs[i, pred[i]]),
        ))
    return out


# ---------------------------------------------------------------------------
# evaluation


def instance_ground_truth(clips: Iterable[ClipRecord]) -> dict[tuple[str, int, int], int]:
    gt = {}
    for clip in clips:
        for frame in clip.frames:
            for n, inst in enumerate(frame.instances):
                if inst.instance_label is not None:
                    gt[(clip.clip_id, frame.frame_idx, n)] = int(inst.instance_label)
    return gt


def average_precision(scores: Sequence[float], correct: Sequence[bool], num_positives: int) -> float:
    """Area under the stepwise precision-recall curve of a score ranking."""
    if num_positives <= 0:
        return float("nan")
    scores = np.asarray(scores, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    hits = correct[order]
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float((precision * hits).sum() / num_positives)


def eval_instance_localization(preds: Sequence[InstancePrediction], ground_truth) -> dict:
    """Per-class precision/recall/AP and mAP at the instance-slot level.

    A prediction is correct when its class equals the slot's label. For each
    class, the predictions of that class are ranked by score.
    """
    gt = ground_truth
    if not isinstance(gt, dict):
        gt = instance_ground_truth(gt)
    gt_clips = {k[0] for k in gt}
    pred_clips = {p.clip_id for p in preds}
    if pred_clips != gt_clips:
        extra = sorted(pred_clips - gt_clips)[:3]
        missing = sorted(gt_clips - pred_clips)[:3]
        raise EvaluationError(f"clip ids disagree: unknown {extra}, unpredicted {missing}")

    by_class = defaultdict(list)
    num_correct = 0
    for p in preds:
        key = (p.clip_id, p.frame_idx, p.instance_index)
        if key not in gt:
            raise EvaluationError(f"no ground truth for instance {key}")
        ok = gt[key] == p.predicted_class
        num_correct += ok
        by_class[p.predicted_class].append((p.score, ok))
    gt_count = defaultdict(int)
    for label in gt.values():
        gt_count[label] += 1

    per_class = {}
    aps = []
    for c in sorted(set(gt_count) | set(by_class)):
        items = by_class.get(c, [])
        tp = sum(ok for _, ok in items)
        ap = average_precision([s for s, _ in items], [ok for _, ok in items], gt_count[c])
        per_class[c] = {
            "precision": tp / len(items) if items else 0.0,
            "recall": tp / gt_count[c] if gt_count[c] else float("nan"),
            "ap": ap,
            "num_gt": gt_count[c],
            "num_pred": len(items),
        }
        if gt_count[c]:
            aps.append(ap)
    return {
        "accuracy": num_correct / len(preds) if preds else 0.0,
        "mAP": float(np.mean(aps)) if aps else 0.0,
        "per_class": per_class,
    }

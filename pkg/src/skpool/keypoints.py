"""Keypoint clip records, the line-delimited clip format, point-cloud assembly
and the synthetic detection-error injectors."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .tensor import Segments

PERSON = 0
PERSON_KEYPOINTS = 18
OBJECT_KEYPOINTS = 8


@dataclass(frozen=True)
class InstanceRecord:
    category: int
    keypoints: np.ndarray  # K x 3 (x, y, confidence); a missing keypoint is [0, 0, 0]
    track_id: int | None = None
    instance_label: int | None = None

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=np.float64)
        if kp.ndim != 2 or kp.shape[1] != 3:
            raise ValidationError(f"keypoints must be K x 3, got shape {kp.shape}")
        kp.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)

    @property
    def num_keypoints(self) -> int:
        return self.keypoints.shape[0]

    @property
    def present(self) -> np.ndarray:
        return np.any(self.keypoints != 0.0, axis=1)


@dataclass(frozen=True)
class FrameRecord:
    frame_idx: int
    instances: tuple[InstanceRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    label: int | tuple[int, ...] | None
    frames: tuple[FrameRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if isinstance(self.label, list):
            object.__setattr__(self, "label", tuple(self.label))

    @property
    def label_set(self) -> tuple[int, ...]:
        if self.label is None:
            return ()
        if isinstance(self.label, tuple):
            return self.label
        return (self.label,)


def validate_clip(clip: ClipRecord) -> None:
    where = f"clip {clip.clip_id!r}"
    if len(clip.frames) < 1:
        raise ValidationError(f"{where}: needs at least one frame")
    prev = None
    k_of_category: dict[int, int] = {}
    for frame in clip.frames:
        if prev is not None and frame.frame_idx <= prev:
            raise ValidationError(
                f"{where}: frame_idx must be strictly increasing ({prev} then {frame.frame_idx})"
            )
        prev = frame.frame_idx
        for n, inst in enumerate(frame.instances):
            at = f"{where} frame {frame.frame_idx} instance {n}"
            if inst.category < 0:
                raise ValidationError(f"{at}: category must be >= 0, got {inst.category}")
            k = k_of_category.setdefault(inst.category, inst.num_keypoints)
            if k != inst.num_keypoints:
                raise ValidationError(
                    f"{at}: category {inst.category} has {inst.num_keypoints} keypoints, expected {k}"
                )
            kp = inst.keypoints
            if not np.all(np.isfinite(kp)):
                raise ValidationError(f"{at}: non-finite keypoint value")
            for col, name in enumerate(("x", "y", "confidence")):
                bad = np.flatnonzero((kp[:, col] < 0.0) | (kp[:, col] > 1.0))
                if bad.size:
                    raise ValidationError(
                        f"{at}: keypoint {bad[0]} field {name}={kp[bad[0], col]!r} outside [0, 1]"
                    )


# ---------------------------------------------------------------------------
# line-delimited clip files


def clip_to_dict(clip: ClipRecord) -> dict:
    label = list(clip.label) if isinstance(clip.label, tuple) else clip.label
    return {
        "clip_id": clip.clip_id,
        "label": label,
        "frames": [
            {
                "frame_idx": f.frame_idx,
                "instances": [
                    {
                        "category": inst.category,
                        "track_id": inst.track_id,
                        "instance_label": inst.instance_label,
                        "keypoints": inst.keypoints.tolist(),
                    }
                    for inst in f.instances
                ],
            }
            for f in clip.frames
        ],
    }


def clip_from_dict(obj: dict) -> ClipRecord:
    frames = []
    for f in obj["frames"]:
        instances = [
            InstanceRecord(
                category=int(inst["category"]),
                keypoints=np.asarray(inst["keypoints"], dtype=np.float64).reshape(-1, 3),
                track_id=inst.get("track_id"),
                instance_label=inst.get("instance_label"),
            )
            for inst in f["instances"]
        ]
        frames.append(FrameRecord(int(f["frame_idx"]), tuple(instances)))
    label = obj.get("label")
    if isinstance(label, list):
        label = tuple(int(v) for v in label)
    return ClipRecord(str(obj["clip_id"]), label, tuple(frames))


def load_clips(path) -> list[ClipRecord]:
    clips = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                clip = clip_from_dict(json.loads(line))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed clip record ({exc})") from exc
            try:
                validate_clip(clip)
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            clips.append(clip)
    return clips


def save_clips(clips: Iterable[ClipRecord], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for clip in clips:
            fh.write(json.dumps(clip_to_dict(clip), separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# point clouds


@dataclass(frozen=True)
class KeypointCloud:
    """Flat keypoint rows of one or more clips plus their group structure.

    Row-level arrays have length N, instance-level arrays have one entry per
    (frame, instance) slot and frame-level arrays one entry per frame slot.
    Frame slots only exist for frames that contributed at least one row.
    """

    features: np.ndarray  # N x 4: x, y, confidence, normalized category
    frame_of: np.ndarray
    instance_of: np.ndarray
    keypoint_type_of: np.ndarray
    category_of: np.ndarray
    frame_of_instance: np.ndarray
    instance_index: np.ndarray  # position of the slot inside its FrameRecord
    instance_labels: np.ndarray  # -1 when unknown
    clip_of_frame: np.ndarray
    frame_pos: np.ndarray  # 0-based frame slot within its own clip
    frame_ids: np.ndarray  # original frame_idx
    clip_ids: tuple[str, ...] = ()
    labels: tuple = ()
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def num_frames(self) -> int:
        return self.frame_pos.size

    @property
    def num_instances(self) -> int:
        return self.frame_of_instance.size

    @property
    def num_clips(self) -> int:
        return len(self.clip_ids)

    @property
    def clip_of_instance(self) -> np.ndarray:
        return self.clip_of_frame[self.frame_of_instance]

    def _seg(self, key, group_of, count) -> Segments:
        if key not in self._cache:
            self._cache[key] = Segments(group_of, count)
        return self._cache[key]

    def instance_segments(self) -> Segments:
        """Keypoint rows grouped by instance slot."""
        return self._seg("rows/instance", self.instance_of, self.num_instances)

    def frame_segments(self) -> Segments:
        """Instance slots grouped by frame slot."""
        return self._seg("instance/frame", self.frame_of_instance, self.num_frames)

    def clip_frame_segments(self) -> Segments:
        """Frame slots grouped by clip."""
        return self._seg("frame/clip", self.clip_of_frame, self.num_clips)

    def clip_instance_segments(self) -> Segments:
        """Instance slots grouped by clip."""
        return self._seg("instance/clip", self.clip_of_instance, self.num_clips)

    def with_features(self, features: np.ndarray) -> KeypointCloud:
        return dataclasses.replace(self, features=features, _cache={})


def build_cloud(clip: ClipRecord, num_categories: int, drop_absent: bool = False) -> KeypointCloud:
    """Flatten a clip into keypoint rows.

    Absent keypoints become rows with x = y = confidence = 0 unless
    ``drop_absent`` is set, in which case they are skipped.
    """
    if num_categories < 1:
        raise ValidationError(f"num_categories must be >= 1, got {num_categories}")
    denom = max(num_categories - 1, 1)
    feats, types, cats, inst_of = [], [], [], []
    frame_of_instance, instance_index, instance_labels = [], [], []
    frame_ids = []
    for frame in clip.frames:
        slot_frame = len(frame_ids)
        used = False
        for n, inst in enumerate(frame.instances):
            if inst.category >= num_categories:
                raise ValidationError(
                    f"clip {clip.clip_id!r}: category {inst.category} >= num_categories {num_categories}"
                )
            kp = inst.keypoints
            keep = inst.present if drop_absent else np.ones(kp.shape[0], dtype=bool)
            if not keep.any():
                continue
            slot = len(frame_of_instance)
            rows = kp[keep]
            cat = np.full((rows.shape[0], 1), inst.category / denom)
            feats.append(np.hstack([rows, cat]))
            types.append(np.flatnonzero(keep))
            cats.append(np.full(rows.shape[0], inst.category))
            inst_of.append(np.full(rows.shape[0], slot))
            frame_of_instance.append(slot_frame)
            instance_index.append(n)
            lab = inst.instance_label
            instance_labels.append(-1 if lab is None else int(lab))
            used = True
        if used:
            frame_ids.append(frame.frame_idx)
    if not feats:
        raise ValidationError(f"clip {clip.clip_id!r} produced an empty keypoint cloud")
    inst_of = np.concatenate(inst_of).astype(np.int64)
    frame_of_instance = np.asarray(frame_of_instance, dtype=np.int64)
    nf = len(frame_ids)
    return KeypointCloud(
        features=np.vstack(feats),
        frame_of=frame_of_instance[inst_of],
        instance_of=inst_of,
        keypoint_type_of=np.concatenate(types).astype(np.int64),
        category_of=np.concatenate(cats).astype(np.int64),
        frame_of_instance=frame_of_instance,
        instance_index=np.asarray(instance_index, dtype=np.int64),
        instance_labels=np.asarray(instance_labels, dtype=np.int64),
        clip_of_frame=np.zeros(nf, dtype=np.int64),
        frame_pos=np.arange(nf, dtype=np.int64),
        frame_ids=np.asarray(frame_ids, dtype=np.int64),
        clip_ids=(clip.clip_id,),
        labels=(clip.label,),
    )


def collate(clouds: Sequence[KeypointCloud]) -> KeypointCloud:
    """Stack clouds into one, offsetting group ids so clips stay separate."""
    if len(clouds) == 1:
        return clouds[0]
    row_off = inst_off = frame_off = clip_off = 0
    parts: dict[str, list] = {k: [] for k in (
        "frame_of", "instance_of", "frame_of_instance", "clip_of_frame")}
    for c in clouds:
        parts["frame_of"].append(c.frame_of + frame_off)
        parts["instance_of"].append(c.instance_of + inst_off)
        parts["frame_of_instance"].append(c.frame_of_instance + frame_off)
        parts["clip_of_frame"].append(c.clip_of_frame + clip_off)
        row_off += c.num_rows
        inst_off += c.num_instances
        frame_off += c.num_frames
        clip_off += c.num_clips
    cat = np.concatenate
    return KeypointCloud(
        features=np.vstack([c.features for c in clouds]),
        frame_of=cat(parts["frame_of"]),
        instance_of=cat(parts["instance_of"]),
        keypoint_type_of=cat([c.keypoint_type_of for c in clouds]),
        category_of=cat([c.category_of for c in clouds]),
        frame_of_instance=cat(parts["frame_of_instance"]),
        instance_index=cat([c.instance_index for c in clouds]),
        instance_labels=cat([c.instance_labels for c in clouds]),
        clip_of_frame=cat(parts["clip_of_frame"]),
        frame_pos=cat([c.frame_pos for c in clouds]),
        frame_ids=cat([c.frame_ids for c in clouds]),
        clip_ids=tuple(i for c in clouds for i in c.clip_ids),
        labels=tuple(lab for c in clouds for lab in c.labels),
    )


# ---------------------------------------------------------------------------
# detection-error injectors


def _pick_rows(n: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"ratio must lie in [0, 1], got {ratio}")
    count = int(round(ratio * n))
    return np.sort(rng.choice(n, size=count, replace=False))


def inject_false_positives(cloud: KeypointCloud, sigma: float, ratio: float = 1.0, seed=0) -> KeypointCloud:
    """Jitter x, y of round(ratio * N) rows by N(0, sigma^2), clamped to [0, 1]."""
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    rows = _pick_rows(cloud.num_rows, ratio, rng)
    feats = cloud.features.copy()
    if sigma == 0 or rows.size == 0:
        return cloud.with_features(feats)
    noise = rng.normal(0.0, sigma, size=(rows.size, 2))
    feats[rows, :2] = np.clip(feats[rows, :2] + noise, 0.0, 1.0)
    return cloud.with_features(feats)


def inject_false_negatives(cloud: KeypointCloud, ratio: float, seed=0) -> KeypointCloud:
    """Zero x, y and confidence of exactly round(ratio * N) rows."""
    rng = np.random.default_rng(seed)
    rows = _pick_rows(cloud.num_rows, ratio, rng)
    feats = cloud.features.copy()
    feats[rows, :3] = 0.0
    return cloud.with_features(feats)


def shuffle_tracking(clip: ClipRecord, interval: int, seed=0) -> ClipRecord:
    """Permute track ids among the instances of each frame, one permutation per
    block of ``interval`` frames. The first block keeps the original ids."""
    if interval < 1:
        raise ValidationError(f"interval must be >= 1, got {interval}")
    rng = np.random.default_rng(seed)
    width = max((len(f.instances) for f in clip.frames), default=0)
    frames = []
    perm = np.arange(width)
    for pos, frame in enumerate(clip.frames):
        if pos % interval == 0:
            perm = np.arange(width) if pos == 0 else rng.permutation(width)
        n = len(frame.instances)
        # restrict the block permutation to the instances present in this frame
        order = [int(p) for p in perm if p < n]
        ids = [frame.instances[p].track_id for p in order]
        instances = tuple(
            dataclasses.replace(inst, track_id=tid) for inst, tid in zip(frame.instances, ids)
        )
        frames.append(FrameRecord(frame.frame_idx, instances))
    return ClipRecord(clip.clip_id, clip.label, tuple(frames))


def corrupt_clip(clip: ClipRecord, mode: str, *, ratio: float = 1.0, sigma: float = 0.0,
                 interval: int = 1, seed=0) -> ClipRecord:
    """Record-level corruption used by the ``corrupt`` CLI.

    FP jitter and FN zeroing act on keypoint entries of the record the same way
    the cloud injectors act on rows (absent keypoints count as rows).
    """
    if mode == "track":
        return shuffle_tracking(clip, interval, seed)
    if mode not in ("fp", "fn"):
        raise ValidationError(f"unknown corruption mode {mode!r}")
    rng = np.random.default_rng(seed)
    sizes = [inst.num_keypoints for f in clip.frames for inst in f.instances]
    total = int(sum(sizes))
    if total == 0:
        return clip
    flat = np.vstack([inst.keypoints for f in clip.frames for inst in f.instances]).copy()
    rows = _pick_rows(total, ratio, rng)
    if mode == "fp":
        if sigma < 0:
            raise ValidationError(f"sigma must be >= 0, got {sigma}")
        if sigma > 0 and rows.size:
            flat[rows, :2] = np.clip(flat[rows, :2] + rng.normal(0.0, sigma, (rows.size, 2)), 0.0, 1.0)
    else:
        flat[rows, :] = 0.0
    frames, at = [], 0
    for f in clip.frames:
        insts = []
        for inst in f.instances:
            k = inst.num_keypoints
            insts.append(dataclasses.replace(inst, keypoints=flat[at:at + k]))
            at += k
        frames.append(FrameRecord(f.frame_idx, tuple(insts)))
    return ClipRecord(clip.clip_id, clip.label, tuple(frames))


def label_vector(label, num_classes: int) -> np.ndarray:
    """One-hot for an int label, uniform over the set for a multi-label tuple."""
    vec = np.zeros(num_classes)
    classes = label if isinstance(label, tuple) else (label,)
    if not classes or any(c is None for c in classes):
        raise ValidationError("clip has no label")
    for c in classes:
        if not 0 <= int(c) < num_classes:
            raise ValidationError(f"label {c} outside [0, {num_classes})")
    for c in set(int(c) for c in classes):
        vec[c] = 1.0
    return vec / vec.sum()


def clouds_from_clips(clips: Sequence[ClipRecord], num_categories: int, drop_absent: bool = False):
    return [build_cloud(c, num_categories, drop_absent) for c in clips]

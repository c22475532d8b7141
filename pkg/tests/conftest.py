import dataclasses

import numpy as np
import pytest

from skpool.keypoints import ClipRecord, FrameRecord, InstanceRecord


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f() with respect to array x (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = f()
        flat[k] = orig - eps
        down = f()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def make_clip(F=3, I=2, K=4, seed=0, label=0, categories=(0,), clip_id="c0", instance_labels=None):
    """Random valid clip with F frames of I instances each."""
    rng = np.random.default_rng(seed)
    frames = []
    for f in range(F):
        insts = []
        for i in range(I):
            kp = np.column_stack([rng.uniform(0.05, 0.95, (K, 2)), rng.uniform(0.3, 1.0, (K, 1))])
            lab = None if instance_labels is None else instance_labels[i]
            insts.append(InstanceRecord(categories[i % len(categories)], kp, track_id=i, instance_label=lab))
        frames.append(FrameRecord(f, tuple(insts)))
    return ClipRecord(clip_id, label, tuple(frames))


def clip_bytes(clip) -> tuple:
    """Hashable exact representation of a clip, for bitwise comparisons."""
    return (clip.clip_id, clip.label, tuple(
        (f.frame_idx, tuple((i.category, i.track_id, i.instance_label, i.keypoints.tobytes())
                            for i in f.instances))
        for f in clip.frames))


def permute_rows_within_instances(cloud, rng):
    order = np.concatenate([rng.permutation(np.flatnonzero(cloud.instance_of == s))
                            for s in rng.permutation(cloud.num_instances)])
    return dataclasses.replace(
        cloud,
        features=cloud.features[order],
        frame_of=cloud.frame_of[order],
        instance_of=cloud.instance_of[order],
        keypoint_type_of=cloud.keypoint_type_of[order],
        category_of=cloud.category_of[order],
        _cache={},
    )


def permute_instances(clip, rng):
    frames = tuple(FrameRecord(f.frame_idx, tuple(f.instances[i] for i in rng.permutation(len(f.instances))))
                   for f in clip.frames)
    return ClipRecord(clip.clip_id, clip.label, frames)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

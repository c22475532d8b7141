"""Synthetic stick-figure action clips.

Every class is a closed-form motion program over an 18-joint skeleton
(OpenPose/COCO-18 joint order). Per-instance parameters (body height, speed,
amplitude, phase) are random, and each clip is placed at a random position.
Recognition clips start every person at rest, so the class is only
recoverable from motion. Localization clips start each action part-way
through, so a single frame already shows the pose. Generation is a pure function
of ``(config, seed)``: clip ``i`` draws from ``SeedSequence([seed, i])``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .keypoints import (
    PERSON,
    PERSON_KEYPOINTS,
    ClipRecord,
    FrameRecord,
    InstanceRecord,
)

CLASS_NAMES = (
    "translate-right",
    "oscillate-vertical",
    "limbs-spread",
    "wave-arm",
    "converge-pair",
    "interact-with-object-box",
    "translate-left",
    "zoom-in",
    "kick-leg",
    "raise-both-arms",
)
CONVERGE, OBJECT_BOX = 4, 5
OBJECT_CATEGORY = 1
# person-only programs that change the body pose itself, so a single frame shows what a
# person is doing; localization label k refers to LOCALIZATION_PROGRAMS[k]
LOCALIZATION_PROGRAMS = (2, 3, 8, 9)

# neck-relative joint positions in units of body height, image y pointing down
SKELETON = np.array([
    [0.00, -0.12],  # nose
    [0.00, 0.00],   # neck
    [-0.10, 0.00],  # right shoulder
    [-0.13, 0.15],  # right elbow
    [-0.15, 0.30],  # right wrist
    [0.10, 0.00],   # left shoulder
    [0.13, 0.15],   # left elbow
    [0.15, 0.30],   # left wrist
    [-0.07, 0.40],  # right hip
    [-0.08, 0.62],  # right knee
    [-0.08, 0.85],  # right ankle
    [0.07, 0.40],   # left hip
    [0.08, 0.62],   # left knee
    [0.08, 0.85],   # left ankle
    [-0.03, -0.15],  # right eye
    [0.03, -0.15],   # left eye
    [-0.06, -0.13],  # right ear
    [0.06, -0.13],   # left ear
])
# (pivot joint, moving joints, sign of outward rotation)
LIMBS = {
    "arm_r": (2, (3, 4), 1.0),
    "arm_l": (5, (6, 7), -1.0),
    "leg_r": (8, (9, 10), 1.0),
    "leg_l": (11, (12, 13), -1.0),
}
BOX_OUTLINE = np.array([
    [-0.5, -1.0], [0.5, -1.0], [1.0, -0.5], [1.0, 0.5],
    [0.5, 1.0], [-0.5, 1.0], [-1.0, 0.5], [-1.0, -0.5],
])
MARGIN = 0.05


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    clips_per_class: int = 200
    F: int = 16
    I: int = 2
    K: int = PERSON_KEYPOINTS
    noise_sigma: float = 0.01

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must lie in [2, {len(CLASS_NAMES)}], got {self.num_classes}")
        if self.F < 4:
            raise ConfigError(f"F must be >= 4, got {self.F}")
        if self.I < 1:
            raise ConfigError(f"I must be >= 1, got {self.I}")
        if not 1 <= self.K <= PERSON_KEYPOINTS:
            raise ConfigError(f"K must lie in [1, {PERSON_KEYPOINTS}], got {self.K}")
        if self.clips_per_class < 1:
            raise ConfigError("clips_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def _rotate(vec: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rotate (..., 2) vectors by per-frame angles; angle has shape (F,)."""
    c, s = np.cos(angle)[:, None], np.sin(angle)[:, None]
    x, y = vec[..., 0], vec[..., 1]
    return np.stack([x * c - y * s, x * s + y * c], axis=-1)


def sample_motion(class_id: int, rng: np.random.Generator) -> dict:
    """Random parameters of one person's motion program."""
    p = {
        "class_id": class_id,
        "height": rng.uniform(0.18, 0.26),
        "arm_rest": rng.uniform(0.0, 0.15),
        "speed": rng.uniform(0.25, 0.4),
        "amplitude": rng.uniform(0.04, 0.08),
        "cycles": rng.uniform(1.0, 2.0),
        "phase": rng.uniform(0.0, 2 * np.pi),
        "spread": rng.uniform(1.0, 1.6),
        "wave": rng.uniform(1.5, 2.4),
        "zoom": rng.uniform(0.4, 0.7),
        "kick": rng.uniform(0.9, 1.4),
        "lift": rng.uniform(2.4, 2.9),
        "reach": rng.uniform(0.3, 0.5),
        "box": rng.uniform(0.03, 0.05),
        "hold": 0.0,
    }
    return p


def person_trajectory(p: dict, t: np.ndarray, shift: np.ndarray | None = None) -> np.ndarray:
    """Closed-form joint positions (F, 18, 2) of one person at normalized times t in [0, 1].

    ``shift`` is an extra (F, 2) displacement, used for the pair-level
    converge program.
    """
    c = p["class_id"]
    f = t.size
    # a positive hold starts the action part-way through, as if already under way
    hold = p.get("hold", 0.0)
    ramp = hold + (1.0 - hold) * t
    angles = {name: np.full(f, p["arm_rest"] if name.startswith("arm") else 0.0) for name in LIMBS}
    scale = np.ones(f)
    offset = np.zeros((f, 2))
    if c == 0:
        offset[:, 0] = p["speed"] * t
    elif c == 6:
        offset[:, 0] = -p["speed"] * t
    elif c == 1:
        arg = 2 * np.pi * p["cycles"] * t + p["phase"]
        offset[:, 1] = p["amplitude"] * (np.sin(arg) - np.sin(p["phase"]))
    elif c == 2:
        for name in LIMBS:
            gain = 1.0 if name.startswith("arm") else 0.35
            angles[name] = angles[name] + gain * p["spread"] * ramp
    elif c == 3:
        angles["arm_r"] = angles["arm_r"] + p["wave"] * (hold + (1 - hold) * 0.5 * (1 - np.cos(2 * np.pi * p["cycles"] * t)))
    elif c == OBJECT_BOX:
        angles["arm_r"] = angles["arm_r"] + (np.pi / 2) * p["reach"] * 2 * ramp
    elif c == 7:
        scale = 1.0 + p["zoom"] * ramp
    elif c == 8:
        angles["leg_r"] = angles["leg_r"] + p["kick"] * ramp
    elif c == 9:
        for name in ("arm_r", "arm_l"):
            angles[name] = angles[name] + p["lift"] * ramp
    pose = np.broadcast_to(SKELETON, (f, PERSON_KEYPOINTS, 2)).copy()
    for name, (pivot, joints, sign) in LIMBS.items():
        rel = SKELETON[list(joints)] - SKELETON[pivot]
        rotated = _rotate(np.broadcast_to(rel, (f, len(joints), 2)), sign * angles[name])
        pose[:, list(joints)] = SKELETON[pivot] + rotated
    pose = pose * (p["height"] * scale)[:, None, None] + offset[:, None, :]
    if shift is not None:
        pose = pose + shift[:, None, :]
    return pose


def box_trajectory(wrist: np.ndarray, half: float) -> np.ndarray:
    """Eight contour extreme points of a box hanging from the wrist: (F, 8, 2)."""
    center = wrist + np.array([0.0, half])
    return center[:, None, :] + half * BOX_OUTLINE[None]


def _render_clip(classes, rng: np.random.Generator, cfg: SynthConfig, clip_id: str, label,
                 instance_labels, hold=None, fill=False, gap=(0.3, 0.45)) -> ClipRecord:
    t = np.linspace(0.0, 1.0, cfg.F)
    people = [sample_motion(c, rng) for c in classes]
    if hold is not None:
        for p in people:
            p["hold"] = rng.uniform(*hold)
    gap = rng.uniform(*gap)
    origins = np.array([[gap * k, 0.0] for k in range(len(classes))])
    tracks = []
    for k, p in enumerate(people):
        shift = np.zeros((cfg.F, 2))
        if p["class_id"] == CONVERGE:
            if len(classes) > 1:
                target = origins[:, 0].mean()
                dist = target - origins[k, 0]
            else:
                dist = rng.choice([-1.0, 1.0]) * gap / 2
            shift[:, 0] = rng.uniform(0.5, 0.8) * dist * t
        tracks.append(person_trajectory(p, t, shift) + origins[k])
    # (category, track, source index) per instance; boxes ride on the person's right wrist
    insts = [(PERSON, tr, k) for k, tr in enumerate(tracks)]
    for k, p in enumerate(people):
        if p["class_id"] == OBJECT_BOX:
            insts.append((OBJECT_CATEGORY, box_trajectory(tracks[k][:, 4], p["box"]), k))

    pts = np.concatenate([tr.reshape(-1, 2) for _, tr, _ in insts])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float((hi - lo).max())
    fit = min(1.0, (1 - 2 * MARGIN) / span) if span > 0 else 1.0
    if fill and span > 0:
        # enlarge the scene so that it spans most of the frame
        fit = rng.uniform(0.7, 1.0) * (1 - 2 * MARGIN) / span
    room = (1 - 2 * MARGIN) - (hi - lo) * fit
    place = MARGIN + rng.uniform(0.0, 1.0, size=2) * np.maximum(room, 0.0)

    frames = []
    coords = []
    for cat, tr, k in insts:
        xy = (tr - lo) * fit + place
        if cat == PERSON:
            xy = xy[:, : cfg.K]
        if cfg.noise_sigma > 0:
            xy = xy + rng.normal(0.0, cfg.noise_sigma, size=xy.shape)
        xy = np.clip(xy, 0.0, 1.0)
        conf = rng.uniform(0.5, 1.0, size=xy.shape[:2] + (1,))
        coords.append(np.concatenate([xy, conf], axis=-1))
    for fi in range(cfg.F):
        instances = tuple(
            InstanceRecord(
                category=cat,
                keypoints=coords[n][fi],
                track_id=n,
                instance_label=instance_labels[k],
            )
            for n, (cat, _, k) in enumerate(insts)
        )
        frames.append(FrameRecord(fi, instances))
    return ClipRecord(clip_id, label, tuple(frames))


def _coerce(cfg) -> SynthConfig:
    if isinstance(cfg, dict):
        cfg = SynthConfig(**cfg)
    cfg.validate()
    return cfg


def gen_synthetic(cfg, seed: int) -> list[ClipRecord]:
    """Recognition clips: every person in a clip performs the clip's class."""
    cfg = _coerce(cfg)
    clips = []
    for c in range(cfg.num_classes):
        for j in range(cfg.clips_per_class):
            index = c * cfg.clips_per_class + j
            rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
            clips.append(
                _render_clip([c] * cfg.I, rng, cfg, f"synth-{seed}-{index:05d}", c, [c] * cfg.I)
            )
    return clips


def gen_localization(cfg, seed: int) -> list[ClipRecord]:
    """Multi-person clips in which each person performs a different class.

    Persons are drawn from the pose-changing programs in
    ``LOCALIZATION_PROGRAMS`` and label ``k`` names the k-th of them. Each
    action is already under way in the first frame, so every frame of a
    person shows its class. The clip label is the set of performed classes;
    the per-person classes are kept as ``instance_label`` for evaluation only.
    ``clips_per_class * num_classes`` clips are generated with class tuples
    drawn uniformly.
    """
    cfg = _coerce(cfg)
    if cfg.num_classes > len(LOCALIZATION_PROGRAMS):
        raise ConfigError(
            f"localization supports at most {len(LOCALIZATION_PROGRAMS)} classes, got {cfg.num_classes}"
        )
    if cfg.num_classes < cfg.I:
        raise ConfigError(f"need at least {cfg.I} classes for {cfg.I} distinct persons")
    clips = []
    for index in range(cfg.num_classes * cfg.clips_per_class):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        labels = [int(c) for c in rng.choice(cfg.num_classes, size=cfg.I, replace=False)]
        programs = [LOCALIZATION_PROGRAMS[k] for k in labels]
        clips.append(
            _render_clip(programs, rng, cfg, f"loc-{seed}-{index:05d}", tuple(labels), labels,
                         hold=(0.7, 1.0), fill=True, gap=(0.18, 0.24))
        )
    return clips


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)

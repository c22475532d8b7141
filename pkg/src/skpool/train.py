"""Training loop, Adam, evaluation and detection-error robustness sweeps.

Runs are deterministic: the epoch-``e`` shuffle, mixing decisions and masks all
come from ``default_rng([seed, e])``, so resuming from an epoch checkpoint
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import AdamState, Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError, ValidationError
from .keypoints import (
    ClipRecord,
    KeypointCloud,
    build_cloud,
    collate,
    inject_false_negatives,
    inject_false_positives,
    label_vector,
    load_clips,
    shuffle_tracking,
)
from .localization import pooled_batch_logits, sample_lambda, sample_mix_mask, mix_labels
from .network import MODES, ModelConfig, ModelParams, forward_features, init_params, video_logits
from .tensor import backward, softmax_cross_entropy

log = logging.getLogger(__name__)

EVAL_BATCH = 32
SWEEP_AXES = ("fp", "fn", "track")


@dataclass
class TrainConfig:
    mode: str = "recognition"
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mixing: bool = False
    mix_prob: float = 0.5
    mix_mode: str = "frames"
    seed: int = 0
    train_path: str = ""
    test_path: str | None = None
    ckpt_path: str = "model.skp"
    drop_absent: bool = False
    augment_fn_ratio: float = 0.0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.model.validate()
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mixing:
            if self.mode != "localization":
                raise ConfigError("batch mixing needs mode 'localization'")
            if self.batch_size < 2:
                raise ConfigError("batch mixing needs batch_size >= 2")
        if not 0.0 <= self.mix_prob <= 1.0:
            raise ConfigError("mix_prob must lie in [0, 1]")
        if self.mix_mode not in ("frames", "rows"):
            raise ConfigError(f"mix_mode must be 'frames' or 'rows', got {self.mix_mode!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.adam_eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        if not 0.0 <= self.augment_fn_ratio <= 1.0:
            raise ConfigError("augment_fn_ratio must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> TrainConfig:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)


@dataclass
class RunReport:
    seed: int
    config: dict
    epochs: list[dict] = field(default_factory=list)
    test_accuracy: float | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------------------
# data helpers


def check_schema(clips: Sequence[ClipRecord], cfg: ModelConfig, need_labels: bool = True) -> None:
    for clip in clips:
        for frame in clip.frames:
            for inst in frame.instances:
                if inst.category >= cfg.num_categories:
                    raise ValidationError(
                        f"clip {clip.clip_id!r}: category {inst.category} >= num_categories {cfg.num_categories}"
                    )
                if inst.num_keypoints > cfg.num_keypoint_types:
                    raise ValidationError(
                        f"clip {clip.clip_id!r}: {inst.num_keypoints} keypoints per instance exceed "
                        f"num_keypoint_types {cfg.num_keypoint_types}"
                    )
        if need_labels:
            label_vector(clip.label, cfg.C)


def build_clouds(clips: Sequence[ClipRecord], cfg: ModelConfig, drop_absent: bool = False) -> list[KeypointCloud]:
    return [build_cloud(c, cfg.num_categories, drop_absent) for c in clips]


def _labels(cloud: KeypointCloud, num_classes: int) -> np.ndarray:
    return np.stack([label_vector(lab, num_classes) for lab in cloud.labels])


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def predict(params: ModelParams, clouds: Sequence[KeypointCloud]) -> np.ndarray:
    """Video-level logits, one row per cloud."""
    out = []
    for sl in _batches(len(clouds), EVAL_BATCH):
        out.append(video_logits(collate(clouds[sl]), params).data)
    return np.vstack(out) if out else np.zeros((0, params.config.C))


def accuracy_from_logits(logits: np.ndarray, labels: Sequence) -> float:
    """Top-1 accuracy; ties go to the lowest class index. A multi-label clip
    counts as correct when the top class is any of its labels."""
    if len(labels) == 0:
        return 0.0
    pred = np.argmax(logits, axis=1)
    hits = [int(p) in (lab if isinstance(lab, tuple) else (lab,)) for p, lab in zip(pred, labels)]
    return float(np.mean(hits))


# ---------------------------------------------------------------------------
# training


def _batch_loss(cfg: TrainConfig, params: ModelParams, batch: KeypointCloud, rng: np.random.Generator):
    C = cfg.model.C
    labels = _labels(batch, C)
    if cfg.mode == "recognition" or not cfg.mixing:
        logits = video_logits(batch, params)
        return softmax_cross_entropy(logits, labels), logits.data, list(range(batch.num_clips))

    feats, _ = forward_features(batch, params, "localization")
    clip_of_row = batch.clip_of_instance
    frame_pos = batch.frame_pos[batch.frame_of_instance]
    mixes = []
    for a in range(0, batch.num_clips - 1, 2):
        b = a + 1
        if rng.random() >= cfg.mix_prob:
            continue
        lam = sample_lambda(rng)
        ma = sample_mix_mask(frame_pos[clip_of_row == a], lam, rng, cfg.mix_mode)
        mb = sample_mix_mask(frame_pos[clip_of_row == b], lam, rng, cfg.mix_mode)
        mixes.append((a, b, ma, mb))
    logits, sources = pooled_batch_logits(feats, clip_of_row, batch.num_clips, mixes, params)
    targets = np.stack([
        labels[a] if b is None else mix_labels(labels[a], labels[b], lam) for a, b, lam in sources
    ])
    loss = softmax_cross_entropy(logits, targets)
    plain = [k for k, (_, b, _) in enumerate(sources) if b is None]
    return loss, logits.data[plain], [sources[k][0] for k in plain]


def train(cfg: TrainConfig, resume: str | None = None, clips: Sequence[ClipRecord] | None = None,
          test_clips: Sequence[ClipRecord] | None = None, save: bool = True):
    """Train and return (params, report). A checkpoint is written after every epoch."""
    cfg.validate()
    started = time.perf_counter()
    if clips is None:
        if not cfg.train_path:
            raise ConfigError("train_path is empty")
        clips = load_clips(cfg.train_path)
    if not clips:
        raise ConfigError("training set is empty")
    check_schema(clips, cfg.model)
    clouds = build_clouds(clips, cfg.model, cfg.drop_absent)

    if resume:
        ckpt = load_checkpoint(resume, expect_mode=cfg.mode)
        if ckpt.params.config != cfg.model:
            raise ConfigError("resume checkpoint model config differs from the train config")
        params, state, start = ckpt.params, ckpt.adam, ckpt.epoch
    else:
        params = init_params(cfg.model, cfg.mode, cfg.seed)
        state, start = AdamState.zeros_like(params), 0

    report = RunReport(seed=cfg.seed, config=cfg.to_dict())
    # the destination path is not part of the run, so copies of a checkpoint compare equal
    stored = {k: v for k, v in cfg.to_dict().items() if k != "ckpt_path"}
    arrays = {n: t.data for n, t in params.tensors.items()}
    betas = (cfg.beta1, cfg.beta2)
    for epoch in range(start, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(clouds))
        losses, weights, hits, seen = [], [], 0.0, 0
        for sl in _batches(len(order), cfg.batch_size):
            idx = order[sl]
            members = [clouds[i] for i in idx]
            if cfg.augment_fn_ratio > 0:
                members = [inject_false_negatives(c, cfg.augment_fn_ratio, [cfg.seed, epoch, int(i)])
                           for c, i in zip(members, idx)]
            batch = collate(members)
            loss, logits, rows = _batch_loss(cfg, params, batch, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"loss became {value} in epoch {epoch + 1}; last good checkpoint kept")
            params.zero_grads()
            backward(loss)
            adam_step(arrays, {n: t.grad for n, t in params.tensors.items()}, state,
                      cfg.lr, betas, cfg.adam_eps)
            losses.append(value)
            weights.append(len(idx))
            if rows:
                hits += accuracy_from_logits(logits, [batch.labels[r] for r in rows]) * len(rows)
                seen += len(rows)
        params.zero_grads()
        mean_loss = float(np.average(losses, weights=weights))
        train_acc = hits / seen if seen else None
        report.epochs.append({"epoch": epoch + 1, "loss": mean_loss, "train_accuracy": train_acc})
        log.info("epoch %d loss %.4f train_acc %s", epoch + 1, mean_loss,
                 "n/a" if train_acc is None else f"{train_acc:.4f}")
        if save:
            save_checkpoint(Checkpoint(params, state, stored, epoch + 1), cfg.ckpt_path)

    if test_clips is None and cfg.test_path:
        test_clips = load_clips(cfg.test_path)
    if test_clips:
        report.test_accuracy = evaluate(params, test_clips, cfg.drop_absent)
    report.wall_clock = time.perf_counter() - started
    if save:
        Path(cfg.ckpt_path + ".report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return params, report


# ---------------------------------------------------------------------------
# evaluation


def _params_of(model) -> ModelParams:
    if isinstance(model, ModelParams):
        return model
    if isinstance(model, Checkpoint):
        return model.params
    return load_checkpoint(model).params


def evaluate(model, clips: Sequence[ClipRecord], drop_absent: bool = False) -> float:
    """Top-1 video-level accuracy of a checkpoint (path, Checkpoint or params)."""
    params = _params_of(model)
    check_schema(clips, params.config)
    clouds = build_clouds(clips, params.config, drop_absent)
    return accuracy_from_logits(predict(params, clouds), [c.label for c in clips])


def robustness_sweep(model, clips: Sequence[ClipRecord], axis: str, grid: Sequence[float],
                     seed: int = 0, fp_ratio: float = 1.0,
                     drop_absent: bool = False) -> list[tuple[float, float]]:
    """Accuracy at each corruption level: FP sigma, FN ratio or track-switch interval."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if len(grid) == 0:
        raise ConfigError("sweep grid is empty")
    params = _params_of(model)
    check_schema(clips, params.config)
    labels = [c.label for c in clips]
    base = build_clouds(clips, params.config, drop_absent)
    curve = []
    for level in grid:
        if axis == "fp":
            clouds = [inject_false_positives(c, float(level), fp_ratio, [seed, i]) for i, c in enumerate(base)]
        elif axis == "fn":
            clouds = [inject_false_negatives(c, float(level), [seed, i]) for i, c in enumerate(base)]
        else:
            interval = int(level)
            if interval != level:
                raise ConfigError(f"track interval must be an integer, got {level}")
            shuffled = [shuffle_tracking(c, interval, [seed, i]) for i, c in enumerate(clips)]
            clouds = build_clouds(shuffled, params.config, drop_absent)
        curve.append((level, accuracy_from_logits(predict(params, clouds), labels)))
    return curve


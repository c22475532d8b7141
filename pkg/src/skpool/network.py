"""Structured keypoint pooling network.

Layout (all three stages use ``r`` MLP blocks)::

    embed + keypoint encoding          N rows,   width D
    stage 1 (groups: instance slots)
    GPB over instances                 F*I rows, width 2D
    + time encoding
    stage 2 (groups: frames)
    recognition:  GPB over frames      F rows,   width 4D
                  stage 3 (group: whole clip)
    localization: linear lift 2D->4D   F*I rows, width 4D
                  stage 3 (groups: frames)
    ReLU -> max pool per clip -> affine head

A batch is a collated :class:`KeypointCloud`; every pooling step is bounded by
clip, so clips in one batch never see each other.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ValidationError
from .keypoints import KeypointCloud
from .tensor import (
    Segments,
    Tensor,
    add,
    add_row,
    concat_channels,
    layer_norm,
    relu,
    segment_expand,
    segment_max_pool,
)

MODES = ("recognition", "localization")
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    D: int = 32
    r: int = 2
    alpha: int = 4
    C: int = 4
    num_keypoint_types: int = 18
    num_categories: int = 2

    def validate(self) -> None:
        if self.D < 2 or self.D % 2:
            raise ConfigError(f"D must be even and >= 2, got {self.D}")
        if self.r < 1:
            raise ConfigError(f"r must be >= 1, got {self.r}")
        if self.alpha < 1:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")
        if self.C < 2:
            raise ConfigError(f"C must be >= 2, got {self.C}")
        if self.num_keypoint_types < 1 or self.num_categories < 1:
            raise ConfigError("num_keypoint_types and num_categories must be >= 1")

    @property
    def widths(self) -> tuple[int, int, int]:
        return self.D, 2 * self.D, 4 * self.D

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc
        cfg.validate()
        return cfg


def param_shapes(cfg: ModelConfig, mode: str) -> dict[str, tuple[int, int]]:
    """Ordered parameter names and shapes."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    d = cfg.D
    shapes = {
        "embed.w1": (4, d),
        "embed.b1": (1, d),
        "embed.w2": (d, d),
        "embed.b2": (1, d),
    }
    for stage, width in enumerate(cfg.widths, start=1):
        if stage == 3 and mode == "localization":
            shapes["lift.w"] = (2 * d, 4 * d)
        for k in range(cfg.r):
            p = f"stage{stage}.block{k}"
            shapes[f"{p}.norm1.gain"] = (1, width)
            shapes[f"{p}.norm1.bias"] = (1, width)
            shapes[f"{p}.w1"] = (2 * width, width)
            shapes[f"{p}.norm2.gain"] = (1, width)
            shapes[f"{p}.norm2.bias"] = (1, width)
            shapes[f"{p}.w2"] = (width, cfg.alpha * width)
            shapes[f"{p}.w3"] = (cfg.alpha * width, width)
    shapes["head.w"] = (4 * d, cfg.C)
    shapes["head.b"] = (1, cfg.C)
    return shapes


class ModelParams:
    """Named parameter tensors for one model in one mode."""

    def __init__(self, config: ModelConfig, mode: str, arrays: dict[str, np.ndarray]):
        shapes = param_shapes(config, mode)
        missing = [n for n in shapes if n not in arrays]
        if missing:
            raise ValidationError(f"missing parameters: {missing[:5]}")
        extra = [n for n in arrays if n not in shapes]
        if extra:
            raise ValidationError(f"unexpected parameters: {extra[:5]}")
        self.config = config
        self.mode = mode
        self.tensors: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValidationError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"parameter {name!r} is not finite")
            self.tensors[name] = Tensor(arr.copy(), requires_grad=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


HEAD_INIT_SCALE = 0.1
EMBED_INIT_SCALE = 10.0


def init_params(cfg: ModelConfig, mode: str = "recognition", seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, unit norm gains, zero biases.

    The head range is shrunk by ``HEAD_INIT_SCALE``: pooled features are
    large after the residual stages, and a full-range head starts training
    with confident, arbitrary logits. The first embedding layer is widened by
    ``EMBED_INIT_SCALE``: its inputs are coordinates in [0, 1] whose
    pose-related differences are a few hundredths, far below the unit scale
    the Glorot range assumes.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, (rows, cols) in param_shapes(cfg, mode).items():
        if name.endswith(".gain"):
            arrays[name] = np.ones((rows, cols))
        elif name.endswith((".bias", ".b1", ".b2")) or name == "head.b":
            arrays[name] = np.zeros((rows, cols))
        else:
            limit = np.sqrt(6.0 / (rows + cols))
            if name == "head.w":
                limit *= HEAD_INIT_SCALE
            elif name == "embed.w1":
                limit *= EMBED_INIT_SCALE
            arrays[name] = rng.uniform(-limit, limit, size=(rows, cols))
    return ModelParams(cfg, mode, arrays)


# ---------------------------------------------------------------------------
# encodings


def index_encoding(index: int, dim: int) -> np.ndarray:
    """Sinusoid positional encoding with the position replaced by ``index``."""
    return encoding_table(np.array([index]), dim)[0]


def encoding_table(indices, dim: int) -> np.ndarray:
    """Rows ``(sin(i / 10000^(2k/dim)), cos(i / 10000^(2k/dim)))`` interleaved over k."""
    if dim < 2 or dim % 2:
        raise ConfigError(f"encoding dim must be even, got {dim}")
    idx = np.asarray(indices, dtype=np.float64).reshape(-1, 1)
    if np.any(idx < 0):
        raise ValidationError("encoding index must be >= 0")
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angle = idx * freq
    out = np.empty((idx.shape[0], dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


# ---------------------------------------------------------------------------
# blocks


def point_embedding(cloud: KeypointCloud, params: ModelParams) -> Tensor:
    """Shared two-layer perceptron on every keypoint, plus keypoint index encoding."""
    cfg = params.config
    if cloud.num_rows == 0:
        raise ValidationError("cannot embed an empty cloud")
    types = cloud.keypoint_type_of
    if types.size and types.max() >= cfg.num_keypoint_types:
        raise ValidationError(
            f"keypoint type {int(types.max())} >= num_keypoint_types {cfg.num_keypoint_types}"
        )
    x = Tensor(cloud.features)
    h = relu(add_row(x @ params["embed.w1"], params["embed.b1"]))
    h = add_row(h @ params["embed.w2"], params["embed.b2"])
    return add(h, Tensor(encoding_table(types, cfg.D)))


def concat_pool(x: Tensor, s: Segments, w1: Tensor) -> Tensor:
    """relu([x_i ; groupmax(x)_{group(i)}] @ W1) for every row i."""
    expanded = segment_expand(segment_max_pool(x, s), s)
    return relu(concat_channels(x, expanded) @ w1)


def mlp_block(x: Tensor, s: Segments, params: ModelParams, prefix: str) -> Tensor:
    y = add(
        concat_pool(
            layer_norm(x, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"], NORM_EPS),
            s,
            params[f"{prefix}.w1"],
        ),
        x,
    )
    h = layer_norm(y, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"], NORM_EPS)
    return add(relu(h @ params[f"{prefix}.w2"]) @ params[f"{prefix}.w3"], y)


def gpb(x: Tensor, s: Segments, clip_rows: Segments | None = None,
        clip_groups: Segments | None = None) -> Tensor:
    """Grouped pool block: row j = [max over group j ; max over the whole clip].

    ``clip_rows`` assigns input rows to clips and ``clip_groups`` assigns the
    output groups to clips; both default to a single clip.
    """
    local = segment_max_pool(x, s)
    if clip_rows is None:
        clip_rows = Segments.single(x.rows)
    if clip_groups is None:
        clip_groups = Segments.single(s.num_groups)
    glob = segment_expand(segment_max_pool(x, clip_rows), clip_groups)
    return concat_channels(local, glob)


def head(pooled: Tensor, params: ModelParams) -> Tensor:
    return add_row(pooled @ params["head.w"], params["head.b"])


def forward_features(cloud: KeypointCloud, params: ModelParams, mode: str | None = None,
                     trace: dict | None = None) -> tuple[Tensor, Segments]:
    """Nonnegative per-frame (recognition) or per-instance (localization) features.

    Returns the features and the segments assigning each feature row to its clip.
    """
    mode = mode or params.mode
    if mode != params.mode:
        raise ConfigError(f"parameters were built for {params.mode!r}, not {mode!r}")
    cfg = params.config
    inst_rows = cloud.instance_segments()
    clip_of_row = Segments(cloud.clip_of_frame[cloud.frame_of], cloud.num_clips)
    frames_inst = cloud.frame_segments()
    clip_inst = cloud.clip_instance_segments()
    clip_frames = cloud.clip_frame_segments()

    x = point_embedding(cloud, params)
    if trace is not None:
        trace["stage1_rows"] = x.rows
    for k in range(cfg.r):
        x = mlp_block(x, inst_rows, params, f"stage1.block{k}")
    x = gpb(x, inst_rows, clip_of_row, clip_inst)
    x = add(x, Tensor(encoding_table(cloud.frame_pos[cloud.frame_of_instance], 2 * cfg.D)))
    if trace is not None:
        trace["stage2_rows"] = x.rows
    for k in range(cfg.r):
        x = mlp_block(x, frames_inst, params, f"stage2.block{k}")

    if mode == "recognition":
        x = gpb(x, frames_inst, clip_inst, clip_frames)
        groups, out_segments = clip_frames, clip_frames
    else:
        x = x @ params["lift.w"]
        groups, out_segments = frames_inst, clip_inst
    if trace is not None:
        trace["stage3_rows"] = x.rows
    for k in range(cfg.r):
        x = mlp_block(x, groups, params, f"stage3.block{k}")
    return relu(x), out_segments


def video_logits(cloud: KeypointCloud, params: ModelParams) -> Tensor:
    """One logit row per clip: features -> global max pool per clip -> head."""
    feats, segs = forward_features(cloud, params)
    return head(segment_max_pool(feats, segs), params)


def forward_recognition(cloud: KeypointCloud, params: ModelParams) -> Tensor:
    if params.mode != "recognition":
        raise ConfigError(f"forward_recognition needs recognition parameters, got {params.mode!r}")
    return video_logits(cloud, params)

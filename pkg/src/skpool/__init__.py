"""Structured keypoint pooling for keypoint-cloud action recognition and
weakly supervised instance-level action localization."""

from .keypoints import ClipRecord, KeypointCloud, build_cloud, collate, load_clips, save_clips
from .network import ModelConfig, ModelParams, forward_features, forward_recognition, init_params
from .tensor import Segments, Tensor, backward, grad_check

__all__ = [
    "ClipRecord",
    "KeypointCloud",
    "ModelConfig",
    "ModelParams",
    "Segments",
    "Tensor",
    "backward",
    "build_cloud",
    "collate",
    "forward_features",
    "forward_recognition",
    "grad_check",
    "init_params",
    "load_clips",
    "save_clips",
]

__version__ = "0.1.0"

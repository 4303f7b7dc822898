"""Weakly supervised segmentation from image-level labels.

A shifted-window transformer encoder feeds one side-output decoder per
stage; the side maps are fused with fixed weights and each map is pooled to
a bag score by a generalized mean. Training sees only images and bag labels.
"""

from .data import Bag, DatasetManifest, TrainingBag, generate_synthetic, load_manifest
from .encoder import EncoderConfig, encode
from .estimator import SwinMILSegmenter
from .exceptions import ConfigError, DomainError, FormatError, GraphError, NonFiniteError, ShapeError
from .head import fuse, gm_pool, mil_loss, total_loss
from .metrics import EvalReport, evaluate, f1_negative, f1_score, hausdorff
from .model import ModelConfig, SwinMIL
from .tensor import Tensor, no_grad
from .training import Adam, Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Bag",
    "Checkpoint",
    "ConfigError",
    "DatasetManifest",
    "DomainError",
    "EncoderConfig",
    "EvalReport",
    "FormatError",
    "GraphError",
    "ModelConfig",
    "NonFiniteError",
    "ShapeError",
    "SwinMIL",
    "SwinMILSegmenter",
    "Tensor",
    "TrainConfig",
    "TrainingBag",
    "encode",
    "evaluate",
    "f1_negative",
    "f1_score",
    "fuse",
    "generate_synthetic",
    "gm_pool",
    "hausdorff",
    "load_checkpoint",
    "load_manifest",
    "mil_loss",
    "no_grad",
    "save_checkpoint",
    "total_loss",
    "train",
]

"""Infrared/visible image fusion with a learned per-pixel weight map over a Laplacian pyramid."""

from .engine import FusionResult, fuse, fuse_batch
from .image import SourcePair, load_pair_dataset
from .losses import LossWeights
from .metrics import MetricReport, evaluate
from .net import GuidanceNet, NetConfig, init_weights, load_checkpoint, save_checkpoint
from .pyramid import build_pyramid, classical_fuse, collapse_pyramid, guided_fuse
from .trainer import TrainConfig, grid_search, scaling_study, train

__version__ = "0.1.0"

__all__ = [
    "FusionResult",
    "GuidanceNet",
    "LossWeights",
    "MetricReport",
    "NetConfig",
    "SourcePair",
    "TrainConfig",
    "build_pyramid",
    "classical_fuse",
    "collapse_pyramid",
    "evaluate",
    "fuse",
    "fuse_batch",
    "grid_search",
    "guided_fuse",
    "init_weights",
    "load_checkpoint",
    "load_pair_dataset",
    "save_checkpoint",
    "scaling_study",
    "train",
]

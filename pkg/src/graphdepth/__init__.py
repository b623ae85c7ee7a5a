"""Graph-based monocular depth estimation in numpy.

A small reverse-mode autodiff core drives a convolutional encoder, GraphSAGE
message passing over pixel graphs, a channel-gated decoder and depth plus
log-variance heads, trained on synthetic planar scenes.
"""

from .errors import ConfigurationError, FormatError, GraphDepthError, NumericError, UsageError
from .graphbuild import KnnParams, build_grid, build_knn, broadcast_batch
from .model import GraphDepthModel, ModelConfig, load_checkpoint, save_checkpoint
from .objective import LossWeights, compute_metrics, depth_loss
from .data import SceneConfig, generate_dataset, generate_scene
from .trainer import TrainConfig, train_loop, resume, evaluate

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "FormatError", "GraphDepthError", "NumericError", "UsageError",
    "KnnParams", "build_grid", "build_knn", "broadcast_batch",
    "GraphDepthModel", "ModelConfig", "load_checkpoint", "save_checkpoint",
    "LossWeights", "compute_metrics", "depth_loss",
    "SceneConfig", "generate_dataset", "generate_scene",
    "TrainConfig", "train_loop", "resume", "evaluate",
]

"""
Learnable-query adapter engine.

This module provides:
- A reverse-mode gradient tape over float64 numpy arrays
- A frozen ViT backbone, spatial prior module and interaction blocks
- Learnable queries refined per block with gated write-back
- Single-box head, box loss, AdamW with layer-wise LR decay
- Synthetic speckle datasets, metrics and checkpoints
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    LQAdapterError,
    NumericalError,
    ShapeError,
    TapeError,
)
from .models import BBox, MetricsReport, ModelConfig, Sample, TrainResult, load_config
from .tensor import Tape, Tensor, backward
from .params import ParamSpec, ParamStore
from .spatial_prior import MultiScaleTokens, spatial_priors
from .adapter import LQAdapterModel, extract, inject, model_layout, param_count
from .head import box_loss, detect_head
from .metrics import center_rule_pr, cls_metrics, iou
from .optim import OptState, adamw_step, layer_decay_lr
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import load_dataset
from .synthetic import gen_synthetic
from .training import evaluate, score_predictions, train
from .gradcheck import check_model, desk_gradcheck_config
from .ablation import AblationReport, run_ablation

__all__ = [
    # Errors
    "LQAdapterError",
    "ConfigError",
    "ShapeError",
    "TapeError",
    "NumericalError",
    "DataError",
    "CheckpointError",
    # Models
    "BBox",
    "MetricsReport",
    "ModelConfig",
    "Sample",
    "TrainResult",
    "load_config",
    # Autodiff
    "Tape",
    "Tensor",
    "backward",
    "ParamSpec",
    "ParamStore",
    # Adapter
    "MultiScaleTokens",
    "spatial_priors",
    "LQAdapterModel",
    "inject",
    "extract",
    "model_layout",
    "param_count",
    # Head and metrics
    "detect_head",
    "box_loss",
    "iou",
    "center_rule_pr",
    "cls_metrics",
    # Optimization
    "OptState",
    "adamw_step",
    "layer_decay_lr",
    # I/O
    "save_checkpoint",
    "load_checkpoint",
    "load_dataset",
    "gen_synthetic",
    # Runs
    "train",
    "evaluate",
    "score_predictions",
    "check_model",
    "desk_gradcheck_config",
    "AblationReport",
    "run_ablation",
]

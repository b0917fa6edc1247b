"""Desk-scale vision transformer with hierarchical attention selection and
attention-guided crop augmentation."""

__version__ = "0.1.0"

from .backbone import AttentionStack, ViTConfig, forward_features, init_params
from .errors import DavtError
from .has import davt_forward
from .tensor import Tape, Tensor, grad_check
from .train import (TrainConfig, evaluate, load_checkpoint, run_training,
                    save_checkpoint, train_step)

__all__ = [
    "AttentionStack",
    "DavtError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "ViTConfig",
    "davt_forward",
    "evaluate",
    "forward_features",
    "grad_check",
    "init_params",
    "load_checkpoint",
    "run_training",
    "save_checkpoint",
    "train_step",
]

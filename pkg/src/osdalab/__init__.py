"""Desk-scale open-set domain adaptation training laboratory."""

__version__ = "0.1.0"

from .autodiff import (
    NumericError,
    Tensor,
    backward,
    gradient_reversal,
    no_grad,
    nuclear_norm,
    stop_gradient,
)
from .data import OsdaTask, SynthConfig, batch_iterator, generate_task, load_feature_table
from .networks import ModelBundle
from .trainer import Metrics, TrainConfig, evaluate, run

__all__ = [
    "Metrics",
    "ModelBundle",
    "NumericError",
    "OsdaTask",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "batch_iterator",
    "evaluate",
    "generate_task",
    "gradient_reversal",
    "load_feature_table",
    "no_grad",
    "nuclear_norm",
    "run",
    "stop_gradient",
]

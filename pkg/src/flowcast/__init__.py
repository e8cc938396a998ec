"""Traffic flow forecasting with sequence-aware graph recurrent networks,
global spatial-temporal attention layers, and a self-contained float64
autodiff tensor core."""

from .autodiff import Tensor, backward, no_grad
from .model import Forecaster, ModelConfig, l1_loss
from .training import TrainConfig, fit, grad_check

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "Forecaster",
    "ModelConfig",
    "l1_loss",
    "TrainConfig",
    "fit",
    "grad_check",
]

"""Low-bit quantization-aware training driven by label-free distillation from a full-precision teacher."""

from .distill import LossConfig, ce_loss, ensemble_logits, kl_loss, soften, total_loss
from .models import ModelConfig, build_model, clone_weights, forward, load_checkpoint, save_checkpoint
from .quantizers import (
    GradientEstimator,
    MuSchedule,
    QuantizerParams,
    QuantizerSpec,
    attach_quantizer,
    quantize_backward,
    quantize_forward,
)
from .tensor import Tape, Tensor, backward, finite_difference

__version__ = "0.1.0"

__all__ = [
    "GradientEstimator", "LossConfig", "ModelConfig", "MuSchedule", "QuantizerParams",
    "QuantizerSpec", "Tape", "Tensor", "attach_quantizer", "backward", "build_model",
    "ce_loss", "clone_weights", "ensemble_logits", "finite_difference", "forward",
    "kl_loss", "load_checkpoint", "quantize_backward", "quantize_forward", "save_checkpoint",
    "soften", "total_loss",
]

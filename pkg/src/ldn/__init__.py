"""Lightweight U-Net image denoising with teacher-student distillation.

Pure numpy engine: NHWC tensors, conv/transposed-conv kernels with
hand-written vjps, student and teacher graphs, distillation training,
fidelity metrics, halo tiling, memory estimates and FP16 export.
"""

from .errors import AlignmentError, FormatError, ShapeError, TapeError, WeightMismatchError
from .losses import LossWeights, loss_backward, loss_total
from .metrics import psnr, ssim
from .models import (ActivationTape, ArchConfig, Network, build, load_weights, model_macs, network,
                     param_count, save_weights)

__version__ = "0.1.0"

__all__ = [
    "ActivationTape", "AlignmentError", "ArchConfig", "FormatError", "LossWeights", "Network",
    "ShapeError", "TapeError", "WeightMismatchError", "build", "load_weights", "loss_backward",
    "loss_total", "model_macs", "network", "param_count", "psnr", "save_weights", "ssim",
]

"""Masked-image-modeling stereo transformer with an EMA teacher, at desk scale.

Everything runs on a small float64 autodiff engine (:mod:`.tensor`) so that
every gradient in the system can be checked against finite differences.
"""

from .data import StereoSample, synth_generate
from .distillation import StepReport, TeacherState, ema_update, init_teacher, training_step
from .losses import SupervisionBundle, disparity_loss, recon_loss, total_loss
from .model import DisparityPrediction, MaDisStereo, ModelConfig, PatchMask, sample_mask
from .tensor import Tensor, finite_diff_check, no_grad
from .trainer import TrainConfig, Trainer, ablate, train

__version__ = "0.1.0"

__all__ = [
    "DisparityPrediction",
    "MaDisStereo",
    "ModelConfig",
    "PatchMask",
    "StepReport",
    "StereoSample",
    "SupervisionBundle",
    "TeacherState",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "ablate",
    "disparity_loss",
    "ema_update",
    "finite_diff_check",
    "init_teacher",
    "no_grad",
    "recon_loss",
    "sample_mask",
    "synth_generate",
    "total_loss",
    "train",
    "training_step",
]

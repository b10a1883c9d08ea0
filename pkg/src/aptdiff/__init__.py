"""Adaptive personalized training for a miniature text-conditioned diffusion model.

The package pretrains a small conditional U-Net on procedurally drawn shapes,
then personalizes it on a few reference images while an overfitting indicator
adapts augmentation and loss weighting and two regularizers keep the tuned
model's features and cross-attention close to the frozen prior.
"""

from aptdiff.ckpt import ModelBundle, load_checkpoint, save_checkpoint
from aptdiff.config import AptConfig, ExperimentConfig, PretrainConfig, load_config
from aptdiff.indicator import IndicatorState, adaptive_weight, augment_probability, bin_of, compute_gamma
from aptdiff.tinynet import NetConfig, TinyUNet
from aptdiff.trainer import Personalizer, personalize, pretrain

__version__ = "0.1.0"

__all__ = [
    "AptConfig",
    "ExperimentConfig",
    "IndicatorState",
    "ModelBundle",
    "NetConfig",
    "Personalizer",
    "PretrainConfig",
    "TinyUNet",
    "adaptive_weight",
    "augment_probability",
    "bin_of",
    "compute_gamma",
    "load_checkpoint",
    "load_config",
    "personalize",
    "pretrain",
    "save_checkpoint",
]

"""Default hyperparameters and toy-scale geometry.

Full-scale defaults follow the reference training setup (Adam 1e-4 with
betas (0.9, 0.99); loss weights 1 / 0.8 / 0.01; 4:1 ratio between image
resolution and the differential-activation working resolution). The toy
profile keeps the same ratios at 64x64.
"""
from __future__ import annotations

from dataclasses import dataclass, field


ADAM_LR = 1e-4
ADAM_BETAS = (0.9, 0.99)

# Ratio between the editing resolution and the DA working resolution
# (1024 -> 256 full scale, 64 -> 16 toy scale).
DA_DOWNSAMPLE_RATIO = 4

TOY_RESOLUTION = 64
TOY_DA_RESOLUTION = TOY_RESOLUTION // DA_DOWNSAMPLE_RATIO

# Seed for the fixed random-weight feature extractor used by the
# perceptual loss and the metric harness at toy scale.
TOY_FEATURE_SEED = 710


@dataclass
class DAConfig:
    """Differential-activation module training settings."""

    lr: float = ADAM_LR
    betas: tuple[float, float] = ADAM_BETAS
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    working_resolution: int = TOY_DA_RESOLUTION
    base_channels: int = 32
    # Strides of the pair-encoder conv blocks; one entry per block. The
    # stride schedule scales with the working resolution: full-resolution
    # blocks at 16x16 keep the classifier feature map fine enough to
    # localize, while 256x256 inputs would use four stride-2 blocks.
    encoder_strides: tuple[int, ...] = (1, 1)
    classifier_channels: int = 64
    log_every: int = 50


@dataclass
class DeghostHyperparams:
    """Weights and optimizer settings for the deghosting objective."""

    lambda_m: float = 1.0
    lambda_p: float = 0.8
    lambda_a: float = 0.01
    lr: float = ADAM_LR
    betas: tuple[float, float] = ADAM_BETAS
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    # Eq-as-printed uses an unsquared 2-norm over pixel count; set True
    # for the conventional mean-squared form instead.
    squared_mse: bool = False
    log_every: int = 25

    def __post_init__(self):
        if self.lambda_m < 0 or self.lambda_p < 0 or self.lambda_a < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class ToyConfig:
    """Synthetic-world build settings."""

    resolution: int = TOY_RESOLUTION
    latent_layers: int = 4
    latent_dim: int = 8
    seed: int = 7
    # Per-attribute editing strengths exposed in the direction catalog.
    alpha_min: float = 0.4
    alpha_max: float = 1.25
    default_alpha: float = 0.8

"""Adversarial identity protection for portraits against feature-conditioned generators.

Surrogate victim encoders, the identity objective with exact gradients,
per-image PGD, a feed-forward noise predictor with curriculum training,
differentiable distortions for EoT, and evaluation metrics.
"""
from .encoders import EncoderBranch, SurrogateEncoder, default_branches
from .errors import (
    BranchMismatch,
    ConfigError,
    DegenerateLandmarks,
    EmptyDataset,
    IDShieldError,
    NonFiniteLoss,
    ShapeMismatch,
    SingularTransform,
    TooSmall,
    ZeroFeature,
)
from .estimators import NoiseEncoder, PGDProtector
from .losses import LossWeights
from .metrics import ism_proxy, psnr, robustness_report, ssim
from .pgd import PgdConfig, pgd_protect
from .predictor import DEFAULT_STAGES, CurriculumStage, PredictorModel

__version__ = "0.1.0"

__all__ = [
    "BranchMismatch", "ConfigError", "CurriculumStage", "DegenerateLandmarks",
    "EmptyDataset", "EncoderBranch", "IDShieldError", "LossWeights", "NoiseEncoder",
    "NonFiniteLoss", "DEFAULT_STAGES", "PGDProtector", "PgdConfig", "PredictorModel",
    "ShapeMismatch", "SingularTransform", "SurrogateEncoder", "TooSmall", "ZeroFeature",
    "default_branches", "ism_proxy", "pgd_protect", "psnr", "robustness_report", "ssim",
]

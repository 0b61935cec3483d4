"""Bidirectional 3D deformable registration with absent-correspondence
masking, plus a synthetic-data and evaluation harness."""

__version__ = "0.1.0"

from .fbc import CorrespondenceMask, FbcParams, FbError, absent_mask, estimate_masks, fb_error, fb_threshold
from .field import DisplacementField, jacobian_det, resample_field, sample_field, upsample_field, warp
from .losses import LossBreakdown, LossWeights, diffusion_energy, inverse_consistency_loss, masked_ncc, similarity_loss, total_loss
from .metrics import LandmarkSet, MetricsReport, evaluate_registration, neg_jacobian_pct, propagate_landmarks, robustness, tre
from .optim import DivergenceError, RegistrationConfig, RegistrationResult, register_multichannel, register_pair
from .synth import SynthCase, SynthConfig, load_case, make_case, random_smooth_field, write_case
from .volume import ForegroundMask, Volume, foreground, normalize_intensity, resample, trilinear_sample

__all__ = [
    "CorrespondenceMask", "FbcParams", "FbError", "absent_mask",
    "estimate_masks", "fb_error", "fb_threshold",
    "DisplacementField", "jacobian_det", "resample_field", "sample_field",
    "upsample_field", "warp",
    "LossBreakdown", "LossWeights", "diffusion_energy",
    "inverse_consistency_loss", "masked_ncc", "similarity_loss", "total_loss",
    "LandmarkSet", "MetricsReport", "evaluate_registration",
    "neg_jacobian_pct", "propagate_landmarks", "robustness", "tre",
    "DivergenceError", "RegistrationConfig", "RegistrationResult",
    "register_multichannel", "register_pair",
    "SynthCase", "SynthConfig", "load_case", "make_case",
    "random_smooth_field", "write_case",
    "ForegroundMask", "Volume", "foreground", "normalize_intensity",
    "resample", "trilinear_sample",
]

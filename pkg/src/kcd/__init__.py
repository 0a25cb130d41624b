"""K-space cold diffusion for accelerated MRI reconstruction."""

from .degradation import degrade, zero_filled
from .fourier import ValidationError, forward_transform, inverse_transform, magnitude
from .masks import SamplingMask, make_mask, make_schedule, mask_at
from .sampler import multi_sample, sample_cold, sample_naive, sample_one_shot

__version__ = "0.1.0"

__all__ = [
    "ValidationError",
    "forward_transform",
    "inverse_transform",
    "magnitude",
    "SamplingMask",
    "make_mask",
    "make_schedule",
    "mask_at",
    "zero_filled",
    "degrade",
    "sample_naive",
    "sample_cold",
    "sample_one_shot",
    "multi_sample",
]

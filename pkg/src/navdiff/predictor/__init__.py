"""Conditioned diffusion future-frame predictor."""

from navdiff.predictor.diffusion import CODECS, IdentityCodec, NoiseSchedule, PixelCodec, forward_noise, recover_clean
from navdiff.predictor.model import (
    Predictor,
    PredictorConfig,
    PredictorFeatures,
    collate,
    diffusion_loss,
    heldout_loss,
    sample,
    sample_future,
)

__all__ = [
    "CODECS",
    "IdentityCodec",
    "NoiseSchedule",
    "PixelCodec",
    "Predictor",
    "PredictorConfig",
    "PredictorFeatures",
    "collate",
    "diffusion_loss",
    "forward_noise",
    "heldout_loss",
    "recover_clean",
    "sample",
    "sample_future",
]

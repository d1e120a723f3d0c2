"""Desk-scale conditional latent-prior segmentation.

A self-contained float64 tensor library with reverse-mode differentiation,
the three-network segmentation model built on it (image encoder,
segmentation encoder, hybrid decoder with a shared trunk), the staged
training schedule, a deterministic synthetic dataset with a global
disambiguation cue, evaluation metrics, and independent numerical oracles.
"""

__version__ = "0.1.0"

from .gaussian import DiagGaussian, kl_diag, kl_to_standard, log_pdf, reparam_sample
from .model import ArchConfig, CVAEModel, decode, encode_image, encode_segmentation, loss_cvae, predict
from .tensor import ParamRegistry, Tensor, backward, no_grad, zero_grad

__all__ = [
    "ArchConfig",
    "CVAEModel",
    "DiagGaussian",
    "ParamRegistry",
    "Tensor",
    "backward",
    "decode",
    "encode_image",
    "encode_segmentation",
    "kl_diag",
    "kl_to_standard",
    "log_pdf",
    "loss_cvae",
    "no_grad",
    "predict",
    "reparam_sample",
    "zero_grad",
    "__version__",
]

"""Generative matching networks: conditional generation from small sets."""

from .model import (
    DiagGaussian,
    GMNConfig,
    GenerativeMatchingNetwork,
    bernoulli_loglik,
    gaussian_entropy,
    gaussian_kl,
    gaussian_logpdf,
    reparam_sample,
)

__all__ = [
    "DiagGaussian",
    "GMNConfig",
    "GenerativeMatchingNetwork",
    "bernoulli_loglik",
    "gaussian_entropy",
    "gaussian_kl",
    "gaussian_logpdf",
    "reparam_sample",
]

__version__ = "0.1.0"

"""Decoder-as-prior spatial inference: VAE priors for GP and BYM random effects."""

from .errors import (
    DimensionMismatchError,
    DomainError,
    FingerprintMismatchError,
    InvalidArgumentError,
    NumericError,
    ParseError,
    SamplerError,
    VaePriorError,
    VersionMismatchError,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionMismatchError",
    "DomainError",
    "FingerprintMismatchError",
    "InvalidArgumentError",
    "NumericError",
    "ParseError",
    "SamplerError",
    "VaePriorError",
    "VersionMismatchError",
]

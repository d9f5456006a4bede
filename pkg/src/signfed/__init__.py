"""Desk-scale laboratory for sign-quantized, differentially private federated learning."""

from signfed.errors import (
    CalibrationError,
    ConfigError,
    DomainError,
    FormatError,
    NumericError,
    SamplerError,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "ConfigError",
    "DomainError",
    "FormatError",
    "NumericError",
    "SamplerError",
    "__version__",
]

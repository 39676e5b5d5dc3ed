"""Deterministic federated-learning simulator for regression.

Compares three server aggregation strategies: parameter averaging (FedAvg),
mean-teacher distillation (FedDF, regression variant) and entropy-confidence
distillation, where each public sample is supervised by the local model whose
penultimate activations have the lowest entropy.
"""

from fedconf.errors import (
    ConfigError,
    DomainError,
    FedConfError,
    FormatError,
    NumericError,
    ParseError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DomainError",
    "FedConfError",
    "FormatError",
    "NumericError",
    "ParseError",
    "ShapeError",
]

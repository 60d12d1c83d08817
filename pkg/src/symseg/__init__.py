"""Symbolic semantic segmentation with an emergent-language channel."""

from .config import SymSegConfig
from .errors import (BackboneNotFoundError, ConfigError, DivergenceError, RegistryError, SymSegError,
                     UndefinedFitError, ValidationError)

__version__ = "0.1.0"

__all__ = [
    "SymSegConfig", "SymSegError", "ValidationError", "ConfigError", "RegistryError",
    "BackboneNotFoundError", "DivergenceError", "UndefinedFitError",
]

"""Exception hierarchy shared across the package."""


class SymSegError(Exception):
    """Base class for all package errors."""


class ValidationError(SymSegError, ValueError):
    """Input violates a documented precondition (shape, range, finiteness)."""


class ConfigError(ValidationError):
    """Configuration value is out of range or inconsistent."""


class RegistryError(SymSegError):
    """Backbone registry misuse, e.g. a duplicate name."""


class BackboneNotFoundError(RegistryError, KeyError):
    pass


class DivergenceError(SymSegError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, epoch=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.checkpoint = checkpoint


class UndefinedFitError(SymSegError, ValueError):
    """Regression is undefined for the given rows (e.g. a single outcome class)."""

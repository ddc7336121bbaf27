"""Exception types shared across the package."""


class StillmotionError(Exception):
    """Base class for all package errors."""


class InputDomainError(StillmotionError, ValueError):
    """Raised when input values fall outside their documented domain."""


class ShapeError(StillmotionError, ValueError):
    """Raised when tensor shapes are inconsistent with each other or a config."""


class ConfigError(StillmotionError, ValueError):
    """Raised when a configuration value is invalid."""


class ModelError(StillmotionError, RuntimeError):
    """Raised when model parameters or activations are unusable (e.g. NaN)."""


class DataError(StillmotionError, ValueError):
    """Raised when on-disk data (corpus, manifest, checkpoint) is malformed."""

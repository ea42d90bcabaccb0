"""Exception types shared across the package."""


class HairFastError(Exception):
    """Base class for all package errors."""


class ConfigError(HairFastError):
    """Invalid configuration or a tensor that does not conform to it."""


class ShapeMismatchError(ConfigError):
    """Tensor shape/resolution does not match the generator config."""


class DegenerateInputError(HairFastError):
    """Input image has no usable face region; carries the failing stage."""

    def __init__(self, message: str, stage: str = ""):
        super().__init__(message)
        self.stage = stage


class RequestError(HairFastError):
    """Transfer request is missing a required role for its mode."""

    def __init__(self, message: str, missing_role: str = ""):
        super().__init__(message)
        self.missing_role = missing_role


class CheckpointError(HairFastError):
    """Checkpoint file is malformed, corrupt or config-incompatible."""


class NumericalError(HairFastError):
    """A numerical routine left its validity envelope (e.g. non-PSD FID product)."""

"""Exception types raised across the package."""


class DeffGanError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DeffGanError, ValueError):
    """Input tensor or argument has the wrong shape, range, or value."""


class InvalidSpecError(DeffGanError, ValueError):
    """A pyramid spec cannot be built from the requested dimensions."""


class ImageFormatError(DeffGanError, ValueError):
    """A file exists but does not decode as a raster image."""


class GrowthError(DeffGanError, RuntimeError):
    """The generator cannot grow past its configured number of stages."""


class NumericError(DeffGanError, ArithmeticError):
    """A loss or gradient became non-finite."""


class ConfigError(DeffGanError, ValueError):
    """Invalid configuration key or value.

    ``key`` names the offending entry so callers can report it.
    """

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class CheckpointError(DeffGanError, RuntimeError):
    """Checkpoint file is unreadable, corrupt, or from another format version."""


class TrainingDivergedError(NumericError):
    """Training hit a non-finite loss; ``checkpoint_path`` holds the diagnostic state."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path

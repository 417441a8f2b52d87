"""
Exception hierarchy shared by every module
"""


class StoicError(Exception):
    """Base class for all errors raised by stoic_diffusion"""


class ConfigError(StoicError, ValueError):
    """Invalid configuration value or configuration file"""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(StoicError, ValueError):
    """Tensor shapes do not fit the operation"""


class NonFiniteError(StoicError, FloatingPointError):
    """A NaN or Inf value was produced"""


class GradCheckFailure(StoicError):
    """Analytic gradients disagree with finite differences"""


class IncompatibleCheckpointError(StoicError):
    """Checkpoint tensors do not match the requested configuration"""


class CheckpointError(StoicError):
    """Checkpoint file could not be read"""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass

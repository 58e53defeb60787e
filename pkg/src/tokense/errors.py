"""Exception types shared across the package."""


class TokenSeError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(TokenSeError):
    """Operands have incompatible shapes. Message names both shapes."""


class NumericError(TokenSeError):
    """A non-finite value (NaN or Inf) appeared where finite data is required."""


class PreconditionError(TokenSeError):
    """An argument violates a documented precondition."""


class CheckpointError(TokenSeError):
    """A checkpoint file is malformed, corrupt, or has an unsupported version."""


class AudioFormatError(TokenSeError):
    """An audio file does not match the supported interchange format."""

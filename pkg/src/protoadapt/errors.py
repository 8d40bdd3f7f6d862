"""Exception hierarchy shared across the package."""


class ProtoadaptError(Exception):
    """Base class for all package errors."""


class ConfigError(ProtoadaptError):
    """Invalid configuration (caught before any compute; CLI exit code 1)."""


class ShapeError(ProtoadaptError):
    """Tensor/mask/bank shapes do not line up with the declared contract."""


class EmptyMaskError(ProtoadaptError):
    """A support mask has no foreground positions where one is required."""


class NonFiniteError(ProtoadaptError):
    """NaN/Inf reached an operation that requires finite activations."""


class CheckpointError(ProtoadaptError):
    """Checkpoint file is corrupt or does not match the current config."""

"""Exception types raised across the package."""


class SatDinoError(Exception):
    """Base class for package errors."""


class ConfigurationError(SatDinoError, ValueError):
    """Invalid configuration values or incompatible settings."""


class DataError(SatDinoError):
    """Missing, malformed or inconsistent dataset content."""


class SplitError(DataError):
    """A dataset cannot be split as requested."""


class CheckpointError(SatDinoError):
    """A checkpoint is corrupt, truncated or incompatible."""


class NonFiniteLossError(SatDinoError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

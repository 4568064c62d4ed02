"""Exception types shared across the package."""


class UniWRVError(Exception):
    """Base class for package errors."""


class DimensionError(UniWRVError, ValueError):
    """Tensor shapes or channel counts do not line up."""


class UsageError(UniWRVError, RuntimeError):
    """An API was called in a state it does not support."""


class ConfigError(UniWRVError, ValueError):
    """A configuration value is invalid or inconsistent."""


class NonFiniteError(UniWRVError, FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class CheckpointError(UniWRVError, IOError):
    """A checkpoint file is malformed or incompatible."""


class DatasetError(UniWRVError, IOError):
    """A dataset entry is missing or corrupt."""

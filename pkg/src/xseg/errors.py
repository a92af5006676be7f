"""Exception types shared across the package."""


class XsegError(Exception):
    """Base class for package errors."""


class DimensionError(XsegError, ValueError):
    """Array shapes incompatible with the requested operation."""


class ConfigError(XsegError, ValueError):
    """Invalid or inconsistent configuration values."""


class StateError(XsegError, RuntimeError):
    """Operation called out of order, e.g. backward before forward."""


class DataError(XsegError, IOError):
    """Dataset files missing or malformed."""


class TrainingAbort(XsegError, RuntimeError):
    """Training stopped because the loss became non-finite."""

"""Exception hierarchy shared by every scvae module."""


class ScvaeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ScvaeError, ValueError):
    """Bad architecture, run configuration, or shape wiring."""


class UsageError(ScvaeError, RuntimeError):
    """An API was called in a state it does not support."""


class NumericError(ScvaeError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(ScvaeError, ValueError):
    """A binary file does not follow the expected layout."""


class InputError(ScvaeError, ValueError):
    """Data values are outside the accepted domain."""

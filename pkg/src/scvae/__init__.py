"""Skip-connected VAEs and a layer-wise Fisher Information probe."""

from .errors import (
    ConfigurationError,
    FormatError,
    InputError,
    NumericError,
    ScvaeError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "FormatError",
    "InputError",
    "NumericError",
    "ScvaeError",
    "UsageError",
    "__version__",
]

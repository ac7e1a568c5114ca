"""Gas-plume semantic segmentation: model, training, data, and mask labeling."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    NumericsError,
    PlumesegError,
    ShapeError,
    UnsupportedOpError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "FormatError",
    "NumericsError",
    "PlumesegError",
    "ShapeError",
    "UnsupportedOpError",
    "__version__",
]

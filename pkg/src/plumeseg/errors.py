"""Exception taxonomy shared across the package."""


class PlumesegError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PlumesegError):
    """Tensor extents are inconsistent with an operation's contract."""


class ConfigError(PlumesegError):
    """A configuration value is invalid; the message names the field."""


class DataError(PlumesegError):
    """Input data (files, masks, matrices) violates a precondition."""


class FormatError(PlumesegError):
    """A serialized artifact (checkpoint) is malformed or truncated."""


class NumericsError(PlumesegError):
    """A non-finite value was produced; computation is aborted."""


class UnsupportedOpError(PlumesegError):
    """An operation without a registered adjoint reached the tape."""

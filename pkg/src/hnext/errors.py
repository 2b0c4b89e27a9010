"""Exception hierarchy shared by every module."""


class HNextError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HNextError, ValueError):
    """Array dimensions do not fit the operation."""


class ParameterError(HNextError, ValueError):
    """A scalar or configuration parameter is out of its valid range."""


class WiringError(HNextError, ValueError):
    """Rotation orders or channel layouts do not line up between layers."""


class DataError(HNextError, ValueError):
    """Dataset content is unusable (empty split, label out of range, ...)."""


class DegenerateInputError(DataError):
    """Input has no usable support (e.g. an empty mask)."""


class FormatError(HNextError, ValueError):
    """A binary file has the wrong magic number or layout."""


class LengthError(FormatError):
    """A binary payload is shorter or longer than its header announces."""


class ConfigError(HNextError, ValueError):
    """A configuration document is malformed or has unknown keys."""

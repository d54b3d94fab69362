"""Exception types shared across the package."""


class QtapeError(Exception):
    """Base class for all package errors."""


class ShapeError(QtapeError, ValueError):
    """Tensor extents do not satisfy an operation's shape contract."""


class ConfigError(QtapeError, ValueError):
    """Invalid configuration (unsupported bit width, width > 2, bad schedule)."""


class CodecError(QtapeError, ValueError):
    """Bit-pack or unpack called with out-of-range codes or wrong byte count."""


class StateError(QtapeError, RuntimeError):
    """Tape/parameter state inconsistent with the requested operation."""


class DataError(QtapeError, ValueError):
    """Dataset contents violate an invariant (label range, record size)."""


class FormatError(DataError):
    """A data file does not match the expected binary layout."""

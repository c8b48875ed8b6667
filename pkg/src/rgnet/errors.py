"""Exception types shared across the package.

The CLI maps these onto distinct process exit codes, so raising the right
class matters more than the message text.
"""


class RgnetError(Exception):
    """Base class for all package errors."""


class ShapeError(RgnetError, ValueError):
    """Operand shapes or dtypes are incompatible."""


class ConfigError(RgnetError, ValueError):
    """Invalid or unreadable configuration."""


class DataError(RgnetError, ValueError):
    """Malformed dataset, annotation, or checkpoint input."""


class NumericError(RgnetError, ArithmeticError):
    """Numerical failure (divergence, failed check)."""


class GraphTooSmallError(RgnetError, ValueError):
    """Relation graph has fewer than two persons; image must be skipped."""

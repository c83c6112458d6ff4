"""
Exception types raised across the toolkit.

Every error derives from MltnError so the CLI can report any failure with a
single except clause, and from the closest builtin so library callers can
keep catching ValueError and friends.
"""


class MltnError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(MltnError, ValueError):
    pass


class AxisOutOfRange(MltnError, IndexError):
    pass


class DomainError(MltnError, ValueError):
    """Input lies outside the domain of a map or formula."""


class SizeLimit(MltnError, ValueError):
    """A dense oracle would exceed its element cap."""


class NumericalError(MltnError, ArithmeticError):
    """Non-finite or degenerate values during contraction or training."""


class CacheMismatch(MltnError, ValueError):
    """A backward pass was handed a cache from a different forward pass."""


class ConfigError(MltnError, ValueError):
    pass


class DataError(MltnError, ValueError):
    pass


class FormatError(DataError):
    """Bad magic number, header or truncated payload."""


class CountMismatch(DataError):
    pass


class IntegrityError(MltnError, IOError):
    """Checkpoint is truncated or fails its checksum."""


class LabelOutOfRange(MltnError, ValueError):
    pass


class DegenerateLabels(MltnError, ValueError):
    """A metric needs both classes present."""

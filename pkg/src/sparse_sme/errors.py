"""Exception types shared across the package.

The CLI maps these onto stable exit codes: config/argument problems exit 2,
I/O and file-format problems exit 3, numeric failures exit 4.
"""


class SparseSmeError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(SparseSmeError, ValueError):
    """Operand dimensions do not line up."""


class ConfigError(SparseSmeError, ValueError):
    """A configuration value violates its contract."""


class DataError(SparseSmeError, ValueError):
    """Payload values violate a data contract (negative counts, NaN, ...)."""


class FormatError(DataError):
    """A dataset or checkpoint file is corrupt or has the wrong layout."""


class NumericError(SparseSmeError, ArithmeticError):
    """A computation produced non-finite values."""


class UnknownTaskError(SparseSmeError, KeyError):
    """A task name is not part of the model configuration."""


class UnknownRegionError(SparseSmeError, KeyError):
    """A region index has no embedding in the model."""

"""Exception hierarchy shared by every module."""


class CmsslError(Exception):
    """Base class for all package errors."""


class DimensionError(CmsslError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(CmsslError, ValueError):
    """Input is numerically degenerate (e.g. a zero-norm vector)."""


class ContractError(CmsslError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(CmsslError, ValueError):
    """A configuration value is invalid."""


class NumericError(CmsslError, ArithmeticError):
    """A computation produced NaN or Inf."""


class FormatError(CmsslError, ValueError):
    """A file does not follow the expected on-disk format."""


class DatasetLoadError(CmsslError, OSError):
    """A dataset file could not be read."""

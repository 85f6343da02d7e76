"""Exception hierarchy. The CLI maps each family to an exit code."""


class MorphoscopeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ValidationError(MorphoscopeError, ValueError):
    """Inputs violate a documented precondition or schema."""

    exit_code = 3


class GridMismatchError(ValidationError):
    """Two volumes or fields do not share the same grid."""


class NumericalError(MorphoscopeError, ArithmeticError):
    """Non-finite values or a degenerate numerical configuration."""

    exit_code = 4


class DegenerateInputError(NumericalError):
    """Statistic undefined for the given sample (zero variance, constant x...)."""


class NiftiError(MorphoscopeError, OSError):
    """Base for NIfTI-1 read failures."""

    exit_code = 2


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class DimensionalityError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


class HeaderError(NiftiError):
    """Header unreadable for a reason not covered by a narrower class."""

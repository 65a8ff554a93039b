"""Exception hierarchy.

Validation problems (bad input files, out-of-range indices, inconsistent
configuration) derive from :class:`ValidationError`; failures of the numerical
machinery derive from :class:`NumericalError`.  The command line maps the two
families to exit codes 1 and 2.
"""


class DTRSError(Exception):
    """Base class for all package errors."""


class ValidationError(DTRSError, ValueError):
    pass


class NumericalError(DTRSError, ArithmeticError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConflictError(ValidationError):
    """Two observations share the same cell and time."""


class BoundsError(ValidationError, IndexError):
    pass


class DegenerateKnotsError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class SplitError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class ColdStartError(ValidationError):
    """A subject has neither a fitted factor nor a subgroup assignment."""


class NotPositiveDefiniteError(NumericalError):
    pass


class RidgeDegenerateError(NumericalError):
    """Normal equations are singular; a positive ridge weight is required."""


class DivergenceError(NumericalError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block

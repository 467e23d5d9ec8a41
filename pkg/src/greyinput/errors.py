"""Exception hierarchy shared by all modules."""


class GreyInputError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(GreyInputError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(GreyInputError, ValueError):
    """A hyperparameter or argument is outside its admissible range."""


class ContractError(GreyInputError, RuntimeError):
    """An operation was called in a state it does not support."""


class NumericError(GreyInputError, ArithmeticError):
    """Non-finite values appeared where finite values are required."""


class DataError(GreyInputError, ValueError):
    """Input data violates a precondition (empty set, zero counts, ...)."""


class ParseError(GreyInputError, ValueError):
    """Malformed textual or binary input."""


class CompatibilityError(GreyInputError, ValueError):
    """Two artifacts (checkpoint, manifest, ...) do not fit together."""

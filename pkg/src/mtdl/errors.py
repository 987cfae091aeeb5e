"""Exception hierarchy shared across the package."""


class MTDLError(Exception):
    """Base class for all package errors."""


class ValidationError(MTDLError, ValueError):
    """Malformed input: bad shapes, bad config, bad files."""


class NumericalError(MTDLError, ArithmeticError):
    """A computation could not produce a usable result."""


class ConstantVector(ValidationError):
    pass


class InvalidProblem(ValidationError):
    pass


class EmptyActiveSet(ValidationError):
    pass


class DegenerateRow(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class MaxIterations(NumericalError):
    pass


class TransitionPoint(NumericalError):
    """Finite-difference probe changed the active set of the encoding."""


class TooLarge(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class BadMagic(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class TruncatedFile(ValidationError):
    pass

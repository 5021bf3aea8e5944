"""Exception hierarchy.

Every error raised on purpose by this package derives from :class:`LrcpError`,
so callers (and the CLI) can tell contract violations apart from bugs.
"""


class LrcpError(Exception):
    """Base class for all package errors."""


class InvalidInput(LrcpError, ValueError):
    pass


class EmptyInput(InvalidInput):
    pass


class NonFiniteValue(InvalidInput):
    pass


class DimensionMismatch(InvalidInput):
    pass


class RankMismatch(InvalidInput):
    pass


class InvalidRank(InvalidInput):
    pass


class RankDeficient(LrcpError, ArithmeticError):
    pass


class DidNotConverge(LrcpError, ArithmeticError):
    pass


class SizeLimitExceeded(InvalidInput):
    pass


class BudgetExceedsTokens(InvalidInput):
    pass


class InvalidRatio(InvalidInput):
    pass


class StageShapeMismatch(InvalidInput):
    pass


class InvalidComponentCount(InvalidInput):
    pass


class InsufficientSpectrum(LrcpError):
    pass


class TooFewSurvivors(InvalidInput):
    pass


class KeepBelowRank(InvalidInput):
    pass


class InvalidSpectrum(InvalidInput):
    pass


class DimensionTooSmall(InvalidInput):
    pass


class TooManySubsets(InvalidInput):
    pass


class MalformedHeader(LrcpError, ValueError):
    pass


class ShapeMismatch(MalformedHeader):
    """Declared array shape disagrees with the payload size or rank."""


class IoFailure(LrcpError, OSError):
    pass

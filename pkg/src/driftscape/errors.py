"""Exception types raised across the package."""


class DriftscapeError(Exception):
    """Base class for all package errors."""


class DataError(DriftscapeError):
    """Problem with input trajectory data (CLI maps this to exit code 2)."""


class ParseError(DataError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonMonotoneTime(DataError):
    def __init__(self, track, line):
        super().__init__(f"track {track!r}: time not strictly increasing at line {line}")
        self.track = track
        self.line = line


class TooFewPoints(DataError):
    def __init__(self, track):
        super().__init__(f"track {track!r}: fewer than 2 points")
        self.track = track


class EmptyData(DataError):
    pass


class NumericalError(DriftscapeError):
    """Numerical failure (CLI maps this to exit code 3)."""


class SingularJacobian(NumericalError):
    pass


class NonPsdCovariance(NumericalError):
    pass


class NonFiniteValue(NumericalError):
    pass


class AllRestartsFailed(NumericalError):
    pass


class ProposalBudgetExceeded(NumericalError):
    pass


class NonPositiveEstimate(NumericalError):
    pass


class LengthMismatch(ValueError, DriftscapeError):
    pass


class UnsortedTimes(ValueError, DriftscapeError):
    pass


class TimeCollision(ValueError, DriftscapeError):
    pass


class DegenerateGrid(ValueError, DriftscapeError):
    pass

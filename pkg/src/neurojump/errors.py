"""Exception hierarchy.

The workbench CLI maps these onto exit codes: configuration problems exit
with 2, data problems with 3 and numerical failures with 4.
"""


class NeuroJumpError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class ConfigError(NeuroJumpError, ValueError):
    exit_code = 2


class DataError(NeuroJumpError, ValueError):
    exit_code = 3


class IngestionError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DomainError(DataError):
    """An argument lies outside the mathematical domain of an operation."""


class StripError(DomainError):
    """A moment generating function was requested outside its strip."""

    def __init__(self, message, bound=None):
        super().__init__(message)
        self.bound = bound


class DegenerateWindowError(DataError):
    pass


class ShapeError(DataError):
    pass


class BatchingError(DataError):
    pass


class SplitError(InsufficientDataError):
    pass


class GridError(DataError):
    pass


class DegenerateComparisonError(DataError):
    pass


class InfeasibleProblemError(DataError):
    """The portfolio problem has an empty feasible set."""

    def __init__(self, message, constraint=None):
        super().__init__(message)
        self.constraint = constraint


class NumericalError(NeuroJumpError, ArithmeticError):
    exit_code = 4


class TiltInfeasibleError(NumericalError):
    pass


class TrainingDivergence(NumericalError):
    """Raised when the loss blows up; carries the last finite snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class StateError(NeuroJumpError, RuntimeError):
    pass


class PersistenceError(NeuroJumpError):
    exit_code = 3

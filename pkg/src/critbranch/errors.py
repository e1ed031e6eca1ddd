"""Exception hierarchy shared by all modules."""


class CritBranchError(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(CritBranchError, ValueError):
    """Malformed or out-of-domain input (negative entries, shape mismatch...)."""


class DomainError(CritBranchError, ValueError):
    """Input is well formed but outside the mathematical domain of the operation."""


class NumericalError(CritBranchError, ArithmeticError):
    """An iterative numerical method failed."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class DegeneracyError(NumericalError):
    """Second eigenvalue modulus indistinguishable from the spectral radius."""


class NotPSDError(InvalidInputError):
    """Matrix is not symmetric positive semi-definite."""


class PopulationOverflowError(CritBranchError, OverflowError):
    """A population coordinate exceeded the configured explosion cap."""

    def __init__(self, message, step=None, replicate=None):
        super().__init__(message)
        self.step = step
        self.replicate = replicate


class ConsistencyError(CritBranchError, RuntimeError):
    """Two algebraically identical computations disagreed beyond tolerance."""


class StateSpaceError(CritBranchError, RuntimeError):
    """Exact enumeration exceeded its atom budget."""


class UnderpoweredError(InvalidInputError):
    """Too few replicates for the requested statistical test."""

"""Exception types shared across the package."""


class HlmError(Exception):
    """Base class for all package errors."""


class DomainError(HlmError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class NumericalError(HlmError, ArithmeticError):
    """A numerical procedure failed (factorization, underflow to -inf, ...)."""


class RankDeficiencyError(NumericalError):
    """A design or information matrix is rank deficient."""

    def __init__(self, message, columns=None):
        super().__init__(message)
        self.columns = list(columns) if columns else []


class InputError(HlmError, ValueError):
    """Invalid user-supplied data or configuration."""


class DiagnosticUnavailableError(HlmError):
    """A diagnostic cannot be computed from the given chains."""

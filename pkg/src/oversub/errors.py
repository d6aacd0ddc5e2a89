"""Exception types shared across the package."""


class OversubError(Exception):
    """Base class for package errors."""


class ContractViolation(OversubError, ValueError):
    """A documented precondition or invariant was broken by the caller."""


class NumericError(OversubError, ArithmeticError):
    """A computation produced a non-finite value.

    ``op`` names the first primitive whose result went non-finite.
    """

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class ConfigError(OversubError, ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class ReplayError(ContractViolation):
    """A feedback event arrived with a stale or duplicate sequence number."""

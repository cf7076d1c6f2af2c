from __future__ import annotations

from typing import Optional


class ValidationError(ValueError):
    """Malformed document, flag or field. Carries the offending field name."""

    def __init__(self, message: str, *, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ContractViolation(ValueError):
    """An operation was called outside its preconditions."""


class ResidualChaosError(ValidationError):
    pass


class BudgetExceeded(RuntimeError):
    """A computation would exceed a configured size budget."""

    def __init__(self, message: str, *, budget: str, required: Optional[int] = None):
        self.budget = budget
        self.required = required
        super().__init__(message)


class IdentityCheckFailed(RuntimeError):
    pass


EXIT_VALIDATION = 2
EXIT_BUDGET = 3
EXIT_IDENTITY = 4


def exit_code_for(error: BaseException) -> int:
    """CLI exit status for an error raised by a command."""
    if isinstance(error, BudgetExceeded):
        return EXIT_BUDGET
    if isinstance(error, IdentityCheckFailed):
        return EXIT_IDENTITY
    if isinstance(error, (ValidationError, ContractViolation)):
        return EXIT_VALIDATION
    return 1

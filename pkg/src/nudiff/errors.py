"""Exception types shared across the package."""

from __future__ import annotations


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, ordering, kind)."""


class DomainError(ValueError):
    """A time or parameter lies outside the valid range of an SDE."""


class NumericalError(FloatingPointError):
    """A computation produced non-finite values.

    ``step`` carries the integrator step or training iteration when known.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step

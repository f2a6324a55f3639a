"""Semantic exception hierarchy shared by all slisim modules."""
from __future__ import annotations


class SlisimError(Exception):
    """Base error for this package."""


class ConfigError(SlisimError, ValueError):
    """Invalid configuration or model parameters (schema or semantic)."""

    def __init__(self, message: str, failures: list[str] | None = None):
        super().__init__(message)
        self.failures: list[str] = list(failures or [])


class DomainError(SlisimError, ValueError):
    """An argument lies outside the domain a function is defined on."""


class UnsupportedModelError(SlisimError):
    """The requested closed form or mode exists only for specific families."""


class InvariantViolation(SlisimError, AssertionError):
    """An internal runtime invariant failed; indicates a bug, not bad input."""


class NumericalFailure(SlisimError, FloatingPointError):
    """A numerical tolerance was violated during integration.

    Attributes:
        t: Time at which the violation was detected (None if not applicable).
        detail: Human-readable description of the offending quantity.
    """

    def __init__(self, message: str, t: float | None = None, detail: str = ""):
        super().__init__(message)
        self.t = t
        self.detail = detail

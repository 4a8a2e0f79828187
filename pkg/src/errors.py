"""
Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration / usage / report problems
exit 2, numerical failures exit 3.
"""
from typing import Any, Dict, Optional


class MasterPrintError(Exception):
    """Base class for all domain errors raised by this package."""


class ConfigurationError(MasterPrintError, ValueError):
    """Invalid dimensions, spreads, budgets or a malformed config file."""


class UsageError(MasterPrintError, ValueError):
    """A caller broke an operation's precondition (shape mismatch, NaN fitness...)."""


class DegenerateOutputError(MasterPrintError, ArithmeticError):
    """The generator's pre-normalization vector is zero, so there is no direction to return."""


class CalibrationError(MasterPrintError):
    """Too few impostor pairs to produce a trustworthy threshold."""


class NumericalError(MasterPrintError, ArithmeticError):
    def __init__(self, message: str, state_dump: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.state_dump = state_dump or {}


class PoolExhaustedError(MasterPrintError):
    """Diversity fitness requested while no unseen users remain."""


class ReportError(MasterPrintError):
    """Nothing to render, or a report file that cannot be parsed."""


class InvariantViolation(MasterPrintError, AssertionError):
    """An inline coverage / threshold monotonicity check failed."""

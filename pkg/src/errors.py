# src/errors.py
"""Exception hierarchy shared by the library and the command-line runner."""


class HindsightError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 3


class ConfigurationError(HindsightError):
    """Invalid configuration, experiment file or checkpoint/environment pairing."""

    exit_code = 2


class ShapeError(HindsightError, ValueError):
    """Operand dimensions do not agree."""

    exit_code = 2


class UsageError(HindsightError):
    """An API was called in a way it does not support."""


class NumericalError(HindsightError, ArithmeticError):
    """A computation produced or received non-finite values."""


class IntegrationError(NumericalError):
    """An integrator step left the finite range."""


class SolverError(HindsightError):
    """An iterative solver failed to produce a usable answer."""


class TrainingAborted(NumericalError):
    """Training stopped because a loss became non-finite."""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code (2 configuration, 3 runtime)."""
    if isinstance(exc, HindsightError):
        return exc.exit_code
    return 3

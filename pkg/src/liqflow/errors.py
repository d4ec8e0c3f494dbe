"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: usage errors exit 2 (argparse),
InputError 3, NumericalError and subclasses 4, anything else 5.
"""


class LiqflowError(Exception):
    """Base class for all package errors."""


class InputError(LiqflowError):
    """Malformed or inconsistent input data (schema mismatch, bad row)."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


class ConfigurationError(LiqflowError):
    """Invalid or incomplete run configuration."""


class DomainError(LiqflowError):
    """Argument outside the mathematical domain of an operation."""


class UndefinedIndexError(DomainError):
    """Index requested for an entity with a zero total."""


class NumericalError(LiqflowError):
    """Numerical failure (calibration or convergence)."""


class CalibrationError(NumericalError):
    """A calibration target could not be bracketed or reached."""


class ConvergenceError(NumericalError):
    """Fixed-point iteration did not converge within the iteration cap.

    Carries the last state and the residual trace so callers can inspect
    how close the solver got.
    """

    def __init__(self, message, state=None, trace=None):
        super().__init__(message)
        self.state = state
        self.trace = trace


class SingularDesignError(NumericalError):
    """Rank-deficient design or instrument matrix."""

    def __init__(self, message, columns=None):
        if columns:
            message = f"{message}: {', '.join(map(str, columns))}"
        super().__init__(message)
        self.columns = list(columns) if columns else []

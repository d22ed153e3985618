"""Exception types shared across the toolkit.

The CLI maps each family onto an exit code: configuration problems exit 2,
data problems exit 3 and numerical failures exit 4.
"""


class TNAError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(TNAError):
    exit_code = 2


class DataError(TNAError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    """A required column is missing from an input table."""

    def __init__(self, column: str, available=()):
        self.column = column
        msg = f"missing column {column!r}"
        if available:
            msg += f" (available: {', '.join(available)})"
        super().__init__(msg)


class RowError(DataError):
    """A single input row could not be parsed."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class EmptySelectionError(DataError):
    pass


class NumericalError(TNAError, ArithmeticError):
    exit_code = 4


class FitFailedError(NumericalError):
    """Every EM restart ended degenerate."""

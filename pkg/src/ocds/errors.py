"""Exception types shared across the package.

The CLI maps :class:`ConfigError` to exit code 2 and :class:`NumericalError`
to exit code 3.
"""


class OCDSError(Exception):
    """Base class for all package errors."""


class ConfigError(OCDSError, ValueError):
    """Invalid configuration, shape mismatch or malformed input file."""


class NumericalError(OCDSError, ArithmeticError):
    """A computation produced non-finite values or diverged.

    ``step`` and ``stage`` are filled in when known so callers can report
    where things went wrong.
    """

    def __init__(self, message, *, step=None, stage=None, instance=None):
        super().__init__(message)
        self.step = step
        self.stage = stage
        self.instance = instance

    def __str__(self):
        parts = [super().__str__()]
        if self.stage is not None:
            parts.append(f"stage={self.stage}")
        if self.step is not None:
            parts.append(f"step={self.step}")
        if self.instance is not None:
            parts.append(f"instance={self.instance}")
        return " ".join(parts)


class UndefinedCorrelationError(OCDSError, ValueError):
    """Rank correlation requested on an input with zero rank variance."""

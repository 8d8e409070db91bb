"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InputError(ValueError):
    """Caller-supplied data violates a precondition (non-finite coords, bad counts)."""


class ConfigError(ValueError):
    """A configuration value or document is invalid."""


class ContractError(RuntimeError):
    """An internal usage contract was violated (stale plan, coarse index, bad magic)."""


class ParseError(ValueError):
    """A file could not be parsed. Carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingError(RuntimeError):
    """Training diverged or produced non-finite gradients."""

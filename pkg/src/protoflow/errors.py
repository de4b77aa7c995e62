"""Shared exception types.

Every failure mode the library reports deliberately gets its own class so
callers can distinguish bad input from numerical breakdown.
"""


class ProtoflowError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ProtoflowError):
    """Operand shapes are inconsistent with the requested operation."""


class NonFiniteError(ProtoflowError):
    """A NaN or Inf appeared where only finite values are allowed."""


class EmptySetError(ProtoflowError):
    """An operation over a sample set received zero samples."""


class CapacityError(ProtoflowError):
    """A dataset has too few classes or samples for the requested task."""


class ParseError(ProtoflowError):
    """A feature file could not be parsed.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InfeasibleGeometryError(ProtoflowError):
    """Rejection sampling of class centers exceeded its attempt budget."""


class DegenerateVectorError(ProtoflowError):
    """A zero-norm vector reached a cosine-similarity computation."""


class DivergenceError(ProtoflowError):
    """An iterative solve produced a non-finite state.

    Carries the step index at which the blow-up was detected.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class ConfigError(ProtoflowError):
    """A run configuration is malformed or contains unknown keys."""

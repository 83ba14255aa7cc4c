"""Exception types shared across the package."""

from __future__ import annotations


class InvalidArgument(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormat(ParseError):
    pass


class FeasibilityError(ValueError):
    """Raised when a tour breaks a routing constraint.

    ``violation`` carries the structured report produced by ``validate_tour``.
    """

    def __init__(self, violation):
        self.violation = violation
        super().__init__(str(violation))


class SizeLimitError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class StateError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, index: int):
        self.index = index
        super().__init__(message)


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)

# utils/errors.py
from __future__ import annotations

from typing import Any, Optional, Sequence


class ExpressionSyntaxError(ValueError):
    """Malformed expression text. `position` is the 0-based column."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownSymbolError(ValueError):
    def __init__(self, name: str, position: int = 0, reason: str = "unknown symbol"):
        super().__init__(f"{reason} '{name}' (at position {position})")
        self.name = name
        self.position = position


class JetOrderError(ValueError):
    def __init__(self, requested: int, maximum: int, symbol: str = ""):
        where = f" for '{symbol}'" if symbol else ""
        super().__init__(
            f"jet order {requested}{where} exceeds the configured maximum {maximum}"
        )
        self.requested = requested
        self.maximum = maximum


class SubstitutionError(ValueError):
    pass


class MissingBindingError(KeyError):
    def __init__(self, names: Sequence[str]):
        self.names = tuple(names)
        super().__init__(f"no numeric binding for: {', '.join(self.names)}")

    def __str__(self) -> str:
        return self.args[0]


class DomainEvalError(ArithmeticError):
    def __init__(self, subexpression: str, reason: str):
        super().__init__(f"{reason} in '{subexpression}'")
        self.subexpression = subexpression


class DimensionMismatchError(ValueError):
    pass


class ModelParseError(ValueError):
    def __init__(self, message: str, line: int, column: int = 0):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class StructuralCheckError(ValueError):
    def __init__(self, message: str, verdicts: Sequence[Any] = ()):
        super().__init__(message)
        self.verdicts = tuple(verdicts)


class UnsupportedModelError(ValueError):
    pass


class NewtonConvergenceError(RuntimeError):
    def __init__(self, update_norm: float, iterations: int, t: float):
        super().__init__(
            f"Newton iteration did not converge at t={t:.6g}: "
            f"update norm {update_norm:.3e} after {iterations} iterations"
        )
        self.update_norm = update_norm
        self.iterations = iterations


class NumericalBreakdownError(RuntimeError):
    def __init__(self, message: str, last_row: Optional[Any] = None):
        super().__init__(message)
        self.last_row = last_row

from __future__ import annotations
from typing import Optional


class RegimeFilterError(Exception):
    """Base class for every error raised by the services."""


class ConfigError(RegimeFilterError):
    """Bad configuration or input schema. Carries the location when known."""

    def __init__(
        self,
        message: str,
        key: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[int] = None,
        source: Optional[str] = None,
    ):
        self.key = key
        self.line = line
        self.column = column
        self.source = source
        self.message = message
        super().__init__(self._format())

    def _format(self) -> str:
        where = []
        if self.source:
            where.append(str(self.source))
        if self.line is not None:
            where.append(f"line {self.line}" if self.column is None else f"line {self.line}, column {self.column}")
        head = ", ".join(where)
        key = f"'{self.key}' " if self.key else ""
        return f"{head}: {key}{self.message}" if head else f"{key}{self.message}"


class BudgetExceededError(ConfigError):
    """The grid oracle was asked for an instance above its cell budget."""


class ModelError(RegimeFilterError, ValueError):
    """Invalid model object or a violated operation precondition."""


class FilterDivergenceError(RegimeFilterError):
    """Total posterior mass became zero or non-finite."""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        super().__init__(f"step {step}: {message}" if step is not None else message)


class NumericalError(RegimeFilterError):
    """A numerical state that the algebra says cannot happen."""

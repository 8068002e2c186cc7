"""
Exceptions common to all modules.
"""
from collections.abc import Mapping
from typing import Any


class MMAlignError(Exception):
    pass


class ConfigurationError(MMAlignError):
    pass


class DataError(MMAlignError):
    pass


class DimensionError(DataError):
    pass


class SchemaError(DataError):
    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class LabelError(DataError):
    pass


class AlignmentPreconditionError(DataError):
    pass


class EmptySequenceError(DataError):
    pass


class NumericalError(MMAlignError):
    def __init__(self, message: str, parameter: str | None = None):
        if parameter is not None:
            message = f"{message} (parameter {parameter!r})"
        super().__init__(message)
        self.parameter = parameter


class EmptySupportError(NumericalError):
    pass


class DegenerateVectorError(NumericalError):
    pass


class DegenerateColumnError(NumericalError):
    pass


class ConditioningError(NumericalError):
    pass


class NonFiniteLossError(NumericalError):
    def __init__(self, message: str, diagnostics: Mapping[str, Any]):
        super().__init__(f"{message}: {dict(diagnostics)}")
        self.diagnostics = dict(diagnostics)


class StatisticsError(MMAlignError):
    pass


class UndefinedMetricError(MMAlignError):
    pass

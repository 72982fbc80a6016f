"""
Exception hierarchy for SMAR
Library code raises these; the CLI maps them to exit codes.
"""

from typing import Optional


class SmarError(Exception):
    """Base class for every error raised by the smar package"""


class ConfigError(SmarError):
    """Invalid configuration value; the message names the offending field"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ArgumentError(SmarError, ValueError):
    """Invalid argument passed to a strategy or metric"""


class ParseError(SmarError):
    """Malformed input record"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class SchemaError(SmarError):
    """Record is well-formed but inconsistent with the dataset schema"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class NumericError(SmarError, ArithmeticError):
    """Non-finite input where a finite real is required"""


class ShapeError(SmarError, ValueError):
    """Vector or matrix dimensions do not match"""


class TrainingError(SmarError):
    """Training diverged"""

    def __init__(self, epoch: int, message: str):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


class UndefinedMetricError(SmarError):
    """Metric has no queries it can be computed on"""


class OracleLookupError(SmarError, KeyError):
    """Label oracle was asked about an unknown (query_id, item_id) pair"""

    def __str__(self) -> str:
        return self.args[0] if self.args else "unknown item"


class ExperimentError(SmarError):
    """An experiment stage failed"""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        self.detail = message
        super().__init__(f"stage '{stage}' failed: {message}")

    def __reduce__(self):
        # raised inside worker processes
        return (self.__class__, (self.stage, self.detail))

"""Exception hierarchy shared by every frugalfl module."""

from __future__ import annotations


class FrugalFLError(Exception):
    """Base class for all simulator errors."""


class ShapeError(FrugalFLError, ValueError):
    pass


class NumericError(FrugalFLError, ArithmeticError):
    pass


class UsageError(FrugalFLError, ValueError):
    pass


class ConfigError(FrugalFLError, ValueError):
    """Invalid configuration; ``path`` names the offending field when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = f"{path}: " if path else ""
        suffix = f" (line {line})" if line is not None else ""
        super().__init__(f"{prefix}{message}{suffix}")


class PartitionError(FrugalFLError, ValueError):
    pass


class StratificationError(PartitionError):
    pass


class ProtocolError(FrugalFLError, RuntimeError):
    pass


class PrivacyViolation(ProtocolError):
    """A personal-role parameter reached the server."""


class UndefinedMetricError(FrugalFLError, ValueError):
    pass

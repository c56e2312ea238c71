from __future__ import annotations


class MieoError(Exception):
    """Base class of every error raised by the mieo package."""


class MieoValidationError(MieoError, ValueError):
    """Inputs, files or settings that violate a documented contract."""


class SchemaError(MieoValidationError):
    """Column names, kinds or widths that do not match a feature schema."""


class CsvParseError(MieoValidationError):
    """A CSV cell that cannot be read, located by data row and column name."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class ConfigError(MieoValidationError):
    """Settings files or hyperparameters that cannot be resolved."""


class StratificationError(MieoValidationError):
    """Labelled rows that cannot be split with stratification."""


class ConstructionError(MieoValidationError):
    """Layer specifications that do not chain dimensionally."""


class ShapeError(MieoValidationError):
    """Array shapes that do not match a network, a model or each other."""


class EmptyDatasetError(MieoValidationError):
    """An operation received no rows where at least one is required."""


class MieoRuntimeError(MieoError, RuntimeError):
    """Failures that only show up while computing."""


class StaleCacheError(MieoRuntimeError):
    """A forward cache that is missing or older than the network parameters."""


class NonFiniteLossError(MieoRuntimeError):
    """Training produced a NaN or infinite loss."""


class SearchError(MieoRuntimeError):
    """Model selection could not produce a winner."""

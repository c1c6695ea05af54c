"""Exception hierarchy shared across the pipeline.

Each class carries an ``exit_code`` so the CLI can map failures to stable
process exit statuses without a separate lookup table drifting out of sync.
"""

from __future__ import annotations


class RdbError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


# ingestion ------------------------------------------------------------------


class ParseError(RdbError):
    exit_code = 2


class SchemaError(RdbError):
    exit_code = 2

    def __init__(self, message: str, table: str | None = None, column: str | None = None):
        loc = ".".join(p for p in (table, column) if p)
        super().__init__(f"{loc}: {message}" if loc else message)
        self.table = table
        self.column = column


class IngestIoError(RdbError):
    exit_code = 3


class CellTypeError(RdbError):
    exit_code = 3

    def __init__(self, message: str, table: str, column: str, row: int):
        super().__init__(f"{table}.{column} row {row}: {message}")
        self.table = table
        self.column = column
        self.row = row


# graph / sampling -------------------------------------------------------------


class ConsistencyError(RdbError):
    exit_code = 4


class RootNotFound(RdbError):
    exit_code = 5


class RootNotEligible(RdbError):
    exit_code = 5


# features -------------------------------------------------------------------


class EmptyText(RdbError):
    exit_code = 6


class ServiceError(RdbError):
    exit_code = 7


class InsufficientData(RdbError):
    exit_code = 6


class NotFitted(RdbError):
    exit_code = 6


class NonConvergence(RdbError):
    exit_code = 8


# model ----------------------------------------------------------------------


class DimensionMismatch(RdbError):
    exit_code = 9


class DuplicateLabels(RdbError):
    exit_code = 9


class StaleTrace(RdbError):
    exit_code = 9


# training -------------------------------------------------------------------


class ZeroVector(RdbError):
    exit_code = 10


class EmptyCorpus(RdbError):
    exit_code = 10


class LeakageError(RdbError):
    exit_code = 11


class DegenerateLabels(RdbError):
    exit_code = 10


class MissingCheckpoint(RdbError):
    exit_code = 12


class ConfigError(RdbError):
    exit_code = 13

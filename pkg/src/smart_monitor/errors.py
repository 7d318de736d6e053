"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI should use for it:
2 for invalid input, 3 for infeasible requests or data that cannot support
the analysis.
"""

from pathlib import Path


class SmartMonitorError(Exception):
    """Base class for all smart-monitor errors."""

    exit_code: int = 1


class ArgumentError(SmartMonitorError, ValueError):
    """An argument is outside its documented domain."""

    exit_code = 2


class ParseError(SmartMonitorError):
    """A CSV row could not be parsed."""

    exit_code = 2

    def __init__(self, message: str, row: int | None = None) -> None:
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class ValidationError(SmartMonitorError):
    """A patient record violates a field-presence or range invariant."""

    exit_code = 2

    def __init__(self, message: str, field: str | None = None, record_id: str | None = None) -> None:
        self.field = field
        self.record_id = record_id
        prefix = f"record {record_id!r}, field {field!r}: " if field else ""
        super().__init__(prefix + message)


class AlignmentError(SmartMonitorError):
    """Influence vectors from two analyses cannot be matched by patient id."""

    exit_code = 2


class InsufficientDataError(SmartMonitorError):
    """The data cannot support the requested computation."""

    exit_code = 3


class EmptySnapshotError(InsufficientDataError):
    """No subject was enrolled by the requested calendar cutoff."""


class InfeasibleError(SmartMonitorError):
    """A calibration or boundary problem has no admissible solution."""

    exit_code = 3


class NumericalConsistencyError(SmartMonitorError):
    """A matrix that theory pins down came out too far from its known form."""

    exit_code = 3


class InternalContradictionError(SmartMonitorError):
    """A state that snapshot semantics rule out was reached."""

    exit_code = 3


class ReportWriteError(SmartMonitorError):
    """A report could not be written."""

    exit_code = 3

    def __init__(self, path: Path, reason: str) -> None:
        self.path = path
        super().__init__(f"failed to write report {path}: {reason}")

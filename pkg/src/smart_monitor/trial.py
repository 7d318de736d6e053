"""Observed-data model for SMART designs, CSV ingestion, and calendar-time snapshots."""

import json
import math
import re
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .config import Config
from .errors import ArgumentError, EmptySnapshotError, InsufficientDataError, ParseError, ValidationError

logger = Config.get_logger(__name__)

CSV_COLUMNS: tuple[str, ...] = ("id", "enroll_time", "a", "eta", "t1", "r", "b", "c", "u", "delta")
LATENT_COLUMNS: tuple[str, ...] = ("t_event", "v_cens")

DAYS_PER_YEAR = 365.25
TIME_UNITS: dict[str, float] = {"years": 1.0, "days": 1.0 / DAYS_PER_YEAR}

_REGIME_PATTERN = re.compile(r"^A([12])B([12])(?:C([12]))?$")


class DesignKind(Enum):
    """Supported two-stage SMART layouts."""

    SMART1 = "SMART1"  # responders and non-responders both re-randomized
    SMART2 = "SMART2"  # only responders re-randomized


@dataclass(frozen=True, order=True)
class Regime:
    """An embedded dynamic treatment regime A_j B_k (C_l)."""

    a: int
    b: int
    c: int | None = None

    @property
    def label(self) -> str:
        return f"A{self.a}B{self.b}" + (f"C{self.c}" if self.c is not None else "")

    @classmethod
    def parse(cls, label: str) -> "Regime":
        match = _REGIME_PATTERN.match(label.strip().upper())
        if not match:
            raise ArgumentError(f"Unrecognized DTR label: {label!r}")
        a, b, c = match.groups()
        return cls(int(a), int(b), int(c) if c else None)

    def swapped(self) -> "Regime":
        """Return the regime with every arm index relabeled 1 <-> 2."""
        return Regime(3 - self.a, 3 - self.b, None if self.c is None else 3 - self.c)


def _check_probability_pair(name: str, pair: Sequence[float]) -> tuple[float, float]:
    if len(pair) != 2:
        raise ArgumentError(f"{name} must have exactly two entries (got {len(pair)})")
    first, second = float(pair[0]), float(pair[1])
    if not (0 < first < 1 and 0 < second < 1):
        raise ArgumentError(f"{name} entries must lie strictly in (0, 1) (got {first}, {second})")
    if not math.isclose(first + second, 1.0, abs_tol=1e-9):
        raise ArgumentError(f"{name} must sum to 1 (got {first + second})")
    return first, second


@dataclass(frozen=True)
class SmartDesign:
    """Randomization structure of a two-stage SMART.

    Attributes:
        kind: SMART1 (8 embedded DTRs) or SMART2 (4 embedded DTRs)
        ell: First-stage randomization probabilities for A_1, A_2
        p: Responder randomization probabilities for B_1, B_2
        q: Non-responder randomization probabilities for C_1, C_2 (SMART1 only)
        reference: Label of the reference DTR the contrasts are taken against
    """

    kind: DesignKind
    ell: tuple[float, float] = (0.5, 0.5)
    p: tuple[float, float] = (0.5, 0.5)
    q: tuple[float, float] | None = (0.5, 0.5)
    reference: str | None = None

    def __post_init__(self) -> None:
        kind = self.kind if isinstance(self.kind, DesignKind) else DesignKind(str(self.kind).upper())
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "ell", _check_probability_pair("ell", self.ell))
        object.__setattr__(self, "p", _check_probability_pair("p", self.p))

        if kind is DesignKind.SMART1:
            if self.q is None:
                raise ArgumentError("SMART1 designs require non-responder probabilities q")
            object.__setattr__(self, "q", _check_probability_pair("q", self.q))
        else:
            object.__setattr__(self, "q", None)

        default_reference = "A1B1C1" if kind is DesignKind.SMART1 else "A1B1"
        reference = Regime.parse(self.reference or default_reference)
        if reference not in self.dtrs:
            raise ArgumentError(f"Reference {reference.label} is not an embedded DTR of {kind.value}")
        object.__setattr__(self, "reference", reference.label)

    @property
    def dtrs(self) -> tuple[Regime, ...]:
        """Embedded DTR catalog in canonical order (A varies slowest)."""
        if self.kind is DesignKind.SMART1:
            return tuple(Regime(a, b, c) for a in (1, 2) for b in (1, 2) for c in (1, 2))
        return tuple(Regime(a, b) for a in (1, 2) for b in (1, 2))

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(dtr.label for dtr in self.dtrs)

    @property
    def reference_index(self) -> int:
        return self.labels.index(str(self.reference))

    @property
    def contrast_labels(self) -> tuple[str, ...]:
        """Labels of the non-reference DTRs, in catalog order."""
        return tuple(label for label in self.labels if label != self.reference)

    @property
    def n_contrasts(self) -> int:
        return len(self.dtrs) - 1

    def nominal_df(self, kind: str) -> int:
        """Degrees of freedom the Wald statistic should have under the null.

        Args:
            kind: "LR" or "TD"

        Returns:
            Expected rank of the contrast covariance
        """
        if self.kind is DesignKind.SMART1:
            return 5 if kind.upper() == "TD" else 7
        return 3

    def swapped(self) -> "SmartDesign":
        """Design with arm labels 1 <-> 2 relabeled and the reference mapped along."""
        return SmartDesign(
            kind=self.kind,
            ell=(self.ell[1], self.ell[0]),
            p=(self.p[1], self.p[0]),
            q=None if self.q is None else (self.q[1], self.q[0]),
            reference=Regime.parse(str(self.reference)).swapped().label,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "ell": list(self.ell),
            "p": list(self.p),
            "q": list(self.q) if self.q is not None else None,
            "reference": self.reference,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SmartDesign":
        try:
            return cls(
                kind=DesignKind(str(data["kind"]).upper()),
                ell=tuple(data.get("ell", (0.5, 0.5))),
                p=tuple(data.get("p", (0.5, 0.5))),
                q=tuple(data["q"]) if data.get("q") is not None else (0.5, 0.5),
                reference=data.get("reference"),
            )
        except (KeyError, ValueError) as e:
            if isinstance(e, ArgumentError):
                raise
            raise ArgumentError(f"Invalid design definition: {e}") from e

    @classmethod
    def from_file(cls, path: Path) -> "SmartDesign":
        """Load a design from a JSON file."""
        try:
            with Path(path).open() as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ArgumentError(f"Cannot read design file {path}: {e}") from e
        return cls.from_dict(data)


@dataclass(frozen=True, slots=True)
class PatientRecord:
    """One subject's observed SMART data, plus latent times when simulated.

    Second-stage fields follow the observed-data convention: ``t1`` and ``r``
    are present iff the subject was seen to enter stage 2 (``eta == 1``),
    ``b`` iff additionally a responder, ``c`` iff a SMART1 non-responder.
    ``eta`` is None while the subject's stage-2 status is not yet known.
    """

    id: str
    enroll_time: float
    a: int
    u: float
    delta: int
    eta: int | None = None
    t1: float | None = None
    r: int | None = None
    b: int | None = None
    c: int | None = None
    t_event: float | None = None
    v_cens: float | None = None

    @property
    def event_calendar_time(self) -> float | None:
        return self.enroll_time + self.u if self.delta == 1 else None

    def without_stage_two(self) -> "PatientRecord":
        return replace(self, eta=None, t1=None, r=None, b=None, c=None)


def validate_record(record: PatientRecord, design: SmartDesign) -> None:
    """Check a record's field-presence and range invariants.

    Raises:
        ValidationError: Naming the offending field and record id
    """

    def fail(field_name: str, message: str) -> None:
        raise ValidationError(message, field=field_name, record_id=record.id)

    if not (math.isfinite(record.enroll_time) and record.enroll_time >= 0):
        fail("enroll_time", f"must be a finite non-negative time (got {record.enroll_time})")
    if not (math.isfinite(record.u) and record.u >= 0):
        fail("u", f"must be a finite non-negative time (got {record.u})")
    if record.delta not in (0, 1):
        fail("delta", f"must be 0 or 1 (got {record.delta})")
    if record.a not in (1, 2):
        fail("a", f"must be 1 or 2 (got {record.a})")
    if record.eta not in (None, 0, 1):
        fail("eta", f"must be 0, 1 or empty (got {record.eta})")

    if record.eta == 1:
        if record.t1 is None:
            fail("t1", "required when eta=1")
        assert record.t1 is not None
        if not (math.isfinite(record.t1) and 0 <= record.t1 <= record.u):
            fail("t1", f"must satisfy 0 <= t1 <= u (got t1={record.t1}, u={record.u})")
        if record.r not in (0, 1):
            fail("r", f"required as 0 or 1 when eta=1 (got {record.r})")
    else:
        for name in ("t1", "r", "b", "c"):
            if getattr(record, name) is not None:
                fail(name, "must be empty unless eta=1")

    responder = record.eta == 1 and record.r == 1
    if responder != (record.b is not None):
        fail("b", "must be present iff eta=1 and r=1")
    if record.b is not None and record.b not in (1, 2):
        fail("b", f"must be 1 or 2 (got {record.b})")

    salvage = record.eta == 1 and record.r == 0 and design.kind is DesignKind.SMART1
    if salvage != (record.c is not None):
        fail("c", "must be present iff eta=1, r=0 and the design is SMART1")
    if record.c is not None and record.c not in (1, 2):
        fail("c", f"must be 1 or 2 (got {record.c})")


def _parse_optional_float(raw: str, column: str, line: int) -> float | None:
    if raw == "":
        return None
    try:
        return float(raw)
    except ValueError as e:
        raise ParseError(f"column {column!r} is not a number: {raw!r}", row=line) from e


def _parse_optional_int(raw: str, column: str, line: int) -> int | None:
    if raw == "":
        return None
    try:
        value = float(raw)
    except ValueError as e:
        raise ParseError(f"column {column!r} is not an integer: {raw!r}", row=line) from e
    if not value.is_integer():
        raise ParseError(f"column {column!r} is not an integer: {raw!r}", row=line)
    return int(value)


def _require(value: Any, column: str, line: int) -> Any:
    if value is None:
        raise ParseError(f"column {column!r} is required", row=line)
    return value


def ingest_csv(
    path: Path | str,
    design: SmartDesign,
    time_unit: str = "years",
    accrual_window: float | None = None,
    diagnostics: list[str] | None = None,
) -> list[PatientRecord]:
    """Read and validate patient records from a CSV file.

    Args:
        path: CSV file with header id,enroll_time,a,eta,t1,r,b,c,u,delta
        design: Design the records must be consistent with
        time_unit: Unit of every time column ("years" or "days"); converted to years
        accrual_window: If given, enrollment times are assigned evenly over
            [0, accrual_window] in record order, replacing the column
        diagnostics: Optional list that receives one message per repaired record

    Returns:
        Validated records in file order

    Raises:
        ParseError: Malformed file or row (row is the file line number)
        ValidationError: Record invariant violation
    """
    if time_unit not in TIME_UNITS:
        raise ArgumentError(f"Unknown time unit {time_unit!r}; expected one of {sorted(TIME_UNITS)}")
    scale = TIME_UNITS[time_unit]
    path = Path(path)

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError as e:
        raise ParseError(f"file not found: {path}") from e
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"cannot parse {path}: {e}") from e

    missing = [column for column in CSV_COLUMNS if column not in frame.columns]
    if missing:
        raise ParseError(f"header is missing columns {missing}", row=1)

    n = len(frame)
    assigned_enrollment = None
    if accrual_window is not None:
        if accrual_window <= 0:
            raise ArgumentError(f"accrual_window must be positive (got {accrual_window})")
        assigned_enrollment = np.linspace(0.0, accrual_window * scale, n) if n > 1 else np.zeros(n)
        logger.info("Assigning uniform enrollment over %.3f years in record order", accrual_window * scale)

    records: list[PatientRecord] = []
    seen_ids: set[str] = set()
    for index, row in enumerate(frame.itertuples(index=False)):
        line = index + 2  # header is line 1
        values = {column: str(getattr(row, column)).strip() for column in CSV_COLUMNS}

        record_id = _require(values["id"] or None, "id", line)
        if record_id in seen_ids:
            raise ValidationError("duplicate id", field="id", record_id=record_id)
        seen_ids.add(record_id)

        if assigned_enrollment is not None:
            enroll = float(assigned_enrollment[index])
        else:
            enroll = _require(_parse_optional_float(values["enroll_time"], "enroll_time", line), "enroll_time", line)
            enroll *= scale

        t1 = _parse_optional_float(values["t1"], "t1", line)
        record = PatientRecord(
            id=record_id,
            enroll_time=enroll,
            a=_require(_parse_optional_int(values["a"], "a", line), "a", line),
            u=_require(_parse_optional_float(values["u"], "u", line), "u", line) * scale,
            delta=_require(_parse_optional_int(values["delta"], "delta", line), "delta", line),
            eta=_parse_optional_int(values["eta"], "eta", line),
            t1=None if t1 is None else t1 * scale,
            r=_parse_optional_int(values["r"], "r", line),
            b=_parse_optional_int(values["b"], "b", line),
            c=_parse_optional_int(values["c"], "c", line),
        )

        if record.eta == 1 and record.t1 is not None and record.r is None and record.t1 <= record.u:
            # Response status missing for a reason other than the analysis cutoff
            message = f"record {record.id!r}: response status missing after t1={record.t1:.4f}; censored at t1"
            logger.warning(message)
            if diagnostics is not None:
                diagnostics.append(message)
            record = replace(record.without_stage_two(), u=record.t1, delta=0)

        validate_record(record, design)
        records.append(record)

    logger.info("Ingested %d records from %s (%d events)", len(records), path, sum(r.delta for r in records))
    return records


def _format_optional(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_csv(
    records: Sequence[PatientRecord],
    path: Path | str,
    time_unit: str = "years",
    include_latent: bool = False,
) -> Path:
    """Write records in the ingestion schema.

    Args:
        records: Records to write
        path: Destination file
        time_unit: Unit the time columns are written in
        include_latent: Also write the simulator's latent event and censoring times

    Returns:
        Path of the written file
    """
    if time_unit not in TIME_UNITS:
        raise ArgumentError(f"Unknown time unit {time_unit!r}")
    inverse = 1.0 / TIME_UNITS[time_unit]

    def scaled(value: float | None) -> float | None:
        return None if value is None else value * inverse if inverse != 1.0 else value

    columns = CSV_COLUMNS + (LATENT_COLUMNS if include_latent else ())
    rows = []
    for record in records:
        row = {
            "id": record.id,
            "enroll_time": _format_optional(scaled(record.enroll_time)),
            "a": _format_optional(record.a),
            "eta": _format_optional(record.eta),
            "t1": _format_optional(scaled(record.t1)),
            "r": _format_optional(record.r),
            "b": _format_optional(record.b),
            "c": _format_optional(record.c),
            "u": _format_optional(scaled(record.u)),
            "delta": _format_optional(record.delta),
        }
        if include_latent:
            row["t_event"] = _format_optional(scaled(record.t_event))
            row["v_cens"] = _format_optional(scaled(record.v_cens))
        rows.append(row)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=list(columns)).to_csv(path, index=False)
    logger.info("Wrote %d records to %s", len(rows), path)
    return path


@dataclass(frozen=True)
class CohortArrays:
    """Column view of a record set used by the numerical layers.

    Unknown or unreached stage-2 status is encoded as ``eta = -1`` and
    ``t1 = inf``; absent arms are encoded as 0.
    """

    ids: tuple[str, ...]
    enroll: np.ndarray
    a: np.ndarray
    eta: np.ndarray
    t1: np.ndarray
    r: np.ndarray
    b: np.ndarray
    c: np.ndarray
    u: np.ndarray
    delta: np.ndarray

    @property
    def n(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord]) -> "CohortArrays":
        return cls(
            ids=tuple(r.id for r in records),
            enroll=np.array([r.enroll_time for r in records], dtype=float),
            a=np.array([r.a for r in records], dtype=int),
            eta=np.array([-1 if r.eta is None else r.eta for r in records], dtype=int),
            t1=np.array([np.inf if r.eta != 1 or r.t1 is None else r.t1 for r in records], dtype=float),
            r=np.array([r.r or 0 for r in records], dtype=int),
            b=np.array([r.b or 0 for r in records], dtype=int),
            c=np.array([r.c or 0 for r in records], dtype=int),
            u=np.array([r.u for r in records], dtype=float),
            delta=np.array([r.delta for r in records], dtype=int),
        )


@dataclass(frozen=True)
class AnalysisSnapshot:
    """The trial as visible at a calendar cutoff.

    Attributes:
        cutoff: Calendar time of the analysis
        records: Administratively censored records of subjects enrolled by the cutoff
        planned_events: Total events the information fraction is measured against
    """

    cutoff: float
    records: tuple[PatientRecord, ...]
    planned_events: int = field(default=0)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def events(self) -> int:
        return sum(record.delta for record in self.records)

    @property
    def info_fraction(self) -> float:
        if self.planned_events <= 0:
            return 0.0
        return min(1.0, self.events / self.planned_events)

    @cached_property
    def arrays(self) -> CohortArrays:
        return CohortArrays.from_records(self.records)


def _truncate(record: PatientRecord, t_cal: float) -> PatientRecord:
    """Apply administrative censoring at calendar time t_cal to one record."""
    if record.enroll_time + record.u <= t_cal:
        u, delta = record.u, record.delta
    else:
        u, delta = max(0.0, t_cal - record.enroll_time), 0

    truncated = replace(record, u=u, delta=delta)
    if record.eta == 1:
        assert record.t1 is not None
        if record.enroll_time + record.t1 > t_cal:
            truncated = truncated.without_stage_two()
    elif record.eta == 0 and delta == 0:
        # A stage-1 death not yet observed leaves stage-2 status unknown
        truncated = truncated.without_stage_two()
    return truncated


def snapshot(
    records: Sequence[PatientRecord],
    t_cal: float,
    planned_events: int | None = None,
) -> AnalysisSnapshot:
    """Build the dataset visible at calendar time t_cal.

    Args:
        records: Full (or later-cutoff) records
        t_cal: Calendar cutoff of the analysis
        planned_events: Denominator of the information fraction; defaults to
            the number of events in ``records``

    Returns:
        Snapshot holding only subjects enrolled by t_cal, administratively censored

    Raises:
        EmptySnapshotError: If no subject was enrolled by t_cal
    """
    if not records:
        raise EmptySnapshotError("No records to snapshot")
    first_enrollment = min(record.enroll_time for record in records)
    if t_cal < first_enrollment:
        raise EmptySnapshotError(f"Cutoff {t_cal:.4f} precedes the first enrollment at {first_enrollment:.4f}")

    visible = tuple(_truncate(record, t_cal) for record in records if record.enroll_time <= t_cal)
    total = planned_events if planned_events is not None else sum(record.delta for record in records)
    result = AnalysisSnapshot(cutoff=float(t_cal), records=visible, planned_events=int(total))
    logger.debug(
        "Snapshot at t=%.4f: n=%d, events=%d, information=%.3f",
        t_cal,
        result.n,
        result.events,
        result.info_fraction,
    )
    return result


def find_interim_time(records: Sequence[PatientRecord], fraction: float) -> float:
    """Smallest calendar time by which ceil(fraction * total events) events are observed.

    Args:
        records: Full-data records
        fraction: Target information fraction in (0, 1)

    Returns:
        Calendar time of the qualifying event

    Raises:
        ArgumentError: If fraction is outside (0, 1)
        InsufficientDataError: If the records contain no event
    """
    if not 0 < fraction < 1:
        raise ArgumentError(f"fraction must lie in (0, 1) (got {fraction})")
    event_times = sorted(record.enroll_time + record.u for record in records if record.delta == 1)
    if not event_times:
        raise InsufficientDataError("No events observed; cannot place an interim analysis")

    needed = max(1, math.ceil(fraction * len(event_times) - 1e-9))
    return event_times[needed - 1]


def final_analysis_time(records: Sequence[PatientRecord]) -> float:
    """Calendar time by which every subject's follow-up is resolved."""
    if not records:
        raise EmptySnapshotError("No records")
    return max(record.enroll_time + record.u for record in records)


def load_records(
    data: Path | str | Sequence[PatientRecord],
    design: SmartDesign,
    **ingest_options: Any,
) -> list[PatientRecord]:
    """Accept either a CSV path or already-loaded records."""
    if isinstance(data, str | Path):
        return ingest_csv(data, design, **ingest_options)
    return list(data)

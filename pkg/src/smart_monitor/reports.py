"""Report serialization with atomic writes."""

import hashlib
import io
import json
import threading
import time
from collections.abc import Sequence
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import pandas as pd

from .boundaries import BoundarySet
from .config import Config
from .errors import ArgumentError, ReportWriteError
from .monitoring import Decision, OcReport, SurvivalCurve, curves_frame
from .simulation import ScenarioConfig
from .statistics import TestSummary

UTC = timezone.utc  # datetime.UTC alias (Python 3.11+)

logger = Config.get_logger(__name__)

REPORT_FORMATS = ("json", "csv")

Report = OcReport | TestSummary | BoundarySet | ScenarioConfig | Sequence[SurvivalCurve] | Sequence[Decision]


def config_digest(config: dict[str, Any] | None) -> str | None:
    """SHA-256 of a canonical JSON rendering of a configuration."""
    if config is None:
        return None
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _report_type(report: Report) -> str:
    if isinstance(report, OcReport):
        return "oc"
    if isinstance(report, TestSummary):
        return "analysis"
    if isinstance(report, BoundarySet):
        return "boundaries"
    if isinstance(report, ScenarioConfig):
        return "scenario"
    items = list(report)
    if items and all(isinstance(item, SurvivalCurve) for item in items):
        return "curves"
    if items and all(isinstance(item, Decision) for item in items):
        return "decisions"
    raise ArgumentError(f"Cannot serialize report of type {type(report).__name__}")


def _payload(report: Report, report_type: str, time_scale: float) -> dict[str, Any] | list[dict[str, Any]]:
    if report_type == "curves":
        return [
            {
                "dtr": curve.dtr,
                "median": None if curve.median is None else curve.median * time_scale,
                "times": (curve.times * time_scale).tolist(),
                "survival": curve.survival.tolist(),
            }
            for curve in report
        ]
    if report_type == "decisions":
        return [decision.to_dict() for decision in report]
    return report.to_dict()


def _flatten(record: dict[str, Any]) -> dict[str, Any]:
    """One CSV row from a report dict; list fields spread over numbered columns."""
    row: dict[str, Any] = {}
    for key, value in record.items():
        if isinstance(value, list) and value and isinstance(value[0], list):
            for i, inner in enumerate(value, start=1):
                for j, item in enumerate(inner, start=1):
                    row[f"{key}_{i}_{j}"] = item
        elif isinstance(value, list):
            for i, item in enumerate(value, start=1):
                row[f"{key}_{i}"] = item
        else:
            row[key] = value
    return row


def _frame(report: Report, report_type: str, payload: Any, time_scale: float) -> pd.DataFrame:
    if report_type == "curves":
        return curves_frame(report, time_scale)
    if report_type == "decisions":
        return pd.DataFrame(payload)
    return pd.DataFrame([_flatten(payload)])


class ReportWriter:
    """Writes reports atomically, retrying transient IO failures with backoff."""

    def __init__(self, max_retries: int = 3, base_delay: float = 0.5) -> None:
        if max_retries < 1:
            raise ArgumentError(f"max_retries must be at least 1 (got {max_retries})")
        if base_delay < 0:
            raise ArgumentError(f"base_delay must be non-negative (got {base_delay})")

        self.max_retries = max_retries
        self.base_delay = base_delay

        self.reports_written = 0
        self.write_errors = 0
        self.last_write_time: datetime | None = None
        self.last_path: Path | None = None
        self._lock = threading.Lock()

    def _write_text(self, path: Path, text: str) -> None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            with self._lock:
                self.write_errors += 1
            raise ReportWriteError(path, f"cannot create directory: {e}") from e

        for attempt in range(self.max_retries):
            try:
                temp_file = path.with_name(path.name + ".tmp")
                temp_file.write_text(text, encoding="utf-8")
                temp_file.replace(path)
                with self._lock:
                    self.reports_written += 1
                    self.last_write_time = datetime.now(UTC)
                    self.last_path = path
                return

            except OSError as e:
                with self._lock:
                    self.write_errors += 1

                if attempt < self.max_retries - 1:
                    delay = self.base_delay * (2**attempt)
                    logger.warning(
                        "Error writing %s (attempt %d/%d): %s. Retrying in %.1fs...",
                        path,
                        attempt + 1,
                        self.max_retries,
                        e,
                        delay,
                    )
                    time.sleep(delay)
                else:
                    logger.error("All attempts to write %s failed: %s", path, e)
                    raise ReportWriteError(path, str(e)) from e

    def write(
        self,
        report: Report,
        path: Path | str,
        fmt: str = "json",
        seed: int | None = None,
        config: dict[str, Any] | None = None,
        time_scale: float = 1.0,
    ) -> Path:
        """Serialize one report.

        JSON output is an envelope with the report type, seed, configuration and
        its digest, and the payload; keys are sorted so equal inputs give equal
        bytes. CSV output is a flat table: long format for curves, one row per
        decision, one row otherwise.

        Args:
            report: Result object to serialize
            path: Destination file
            fmt: "json" or "csv"
            seed: Seed behind the result, recorded for reproducibility
            config: Design, scenario and boundary settings behind the result
            time_scale: Multiplier applied to curve times (to report in days)

        Returns:
            The written path

        Raises:
            ArgumentError: If the format or report type is not supported
            ReportWriteError: If the file cannot be written
        """
        if fmt not in REPORT_FORMATS:
            raise ArgumentError(f"format must be one of {REPORT_FORMATS} (got {fmt!r})")
        path = Path(path)
        report_type = _report_type(report)
        payload = _payload(report, report_type, time_scale)

        if fmt == "json":
            envelope = {
                "report": report_type,
                "seed": seed,
                "config": config,
                "config_digest": config_digest(config),
                "result": payload,
            }
            text = json.dumps(envelope, indent=2, sort_keys=True, allow_nan=False, default=str) + "\n"
        else:
            frame = _frame(report, report_type, payload, time_scale)
            if report_type != "curves":
                frame.insert(0, "seed", seed)
                frame.insert(1, "config_digest", config_digest(config))
            buffer = io.StringIO()
            frame.to_csv(buffer, index=False)
            text = buffer.getvalue()

        self._write_text(path, text)
        logger.info("Wrote %s report to %s", report_type, path)
        return path

    def health_check(self) -> dict[str, Any]:
        with self._lock:
            return {
                "is_healthy": self.write_errors < self.max_retries,
                "reports_written": self.reports_written,
                "write_errors": self.write_errors,
                "last_path": str(self.last_path) if self.last_path else None,
                "last_write_time": self.last_write_time.isoformat() if self.last_write_time else None,
            }

    def get_stats(self) -> dict[str, Any]:
        return {
            **self.health_check(),
            "config": {"max_retries": self.max_retries, "base_delay": self.base_delay},
        }


def emit_report(
    report: Report,
    path: Path | str,
    fmt: str = "json",
    seed: int | None = None,
    config: dict[str, Any] | None = None,
    time_scale: float = 1.0,
) -> Path:
    """Write a report with a default ReportWriter; see ReportWriter.write."""
    return ReportWriter().write(report, path, fmt, seed=seed, config=config, time_scale=time_scale)


def load_report(path: Path | str) -> dict[str, Any] | pd.DataFrame:
    """Read a report back: the JSON envelope as a dict, or a CSV report as a DataFrame."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".csv":
            return pd.read_csv(path)
        with path.open(encoding="utf-8") as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise ArgumentError(f"Cannot read report {path}: {e}") from e

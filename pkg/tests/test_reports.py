"""Essential tests for report writing."""

import json
import math
from pathlib import Path

import pytest

from src.smart_monitor.boundaries import BoundarySet
from src.smart_monitor.errors import ArgumentError, ReportWriteError
from src.smart_monitor.monitoring import analyze, monitor, survival_curves
from src.smart_monitor.reports import ReportWriter, config_digest, emit_report, load_report
from src.smart_monitor.simulation import preset


@pytest.fixture
def no_sleep(mocker):
    return mocker.patch("src.smart_monitor.reports.time.sleep")


def test_json_report_records_seed_and_config_digest(tmp_path, smart2_design, smart2_records):
    """Test that the JSON envelope carries the seed, the configuration and its digest."""
    summary = analyze(smart2_records, smart2_design)
    config = {"design": smart2_design.to_dict(), "stat": "LR"}
    path = emit_report(summary, tmp_path / "analysis.json", seed=7, config=config)

    envelope = load_report(path)
    assert envelope["report"] == "analysis"
    assert envelope["seed"] == 7
    assert envelope["config_digest"] == config_digest(config)
    assert envelope["result"]["t_value"] == pytest.approx(summary.t_value)
    assert envelope["result"]["labels"] == list(smart2_design.contrast_labels)


def test_json_output_is_byte_stable(tmp_path):
    """Test that equal inputs serialize to identical bytes."""
    boundary = BoundarySet.fixed([math.inf, 8.2], alpha=0.05)
    first = emit_report(boundary, tmp_path / "a.json", seed=1, config={"b": 2, "a": 1})
    second = emit_report(boundary, tmp_path / "b.json", seed=1, config={"a": 1, "b": 2})
    assert first.read_bytes() == second.read_bytes()
    assert json.loads(first.read_text())["result"]["thresholds"][0] == "inf"


def test_config_digest_ignores_key_order():
    """Test that the digest is a function of content only."""
    assert config_digest({"x": 1, "y": [1, 2]}) == config_digest({"y": [1, 2], "x": 1})
    assert config_digest({"x": 1}) != config_digest({"x": 2})
    assert config_digest(None) is None


def test_curves_csv_is_long_format_and_non_increasing(tmp_path, smart1_design, smart1_records):
    """Test that the curves CSV lists every step with survival never increasing within a regime."""
    curves = survival_curves(smart1_records, smart1_design)
    frame = load_report(emit_report(curves, tmp_path / "curves.csv", fmt="csv", time_scale=365.25))

    assert set(frame["dtr"]) == set(smart1_design.labels)
    for _, group in frame.groupby("dtr"):
        assert group["survival"].iloc[0] == 1.0
        assert (group["survival"].diff().dropna() <= 1e-12).all()
        assert (group["time"].diff().dropna() > 0).all()


def test_decisions_csv_has_one_row_per_analysis(tmp_path, smart2_design, smart2_records):
    """Test that monitoring decisions become one CSV row each with the seed column first."""
    decisions = monitor(smart2_records, smart2_design, BoundarySet.fixed([math.inf, math.inf]), [1.0, 2.5])
    frame = load_report(emit_report(decisions, tmp_path / "decisions.csv", fmt="csv", seed=3))

    assert list(frame.columns[:2]) == ["seed", "config_digest"]
    assert list(frame["verdict"]) == ["continue", "final-accept"]
    assert (frame["seed"] == 3).all()


def test_scenario_csv_flattens_list_fields(tmp_path):
    """Test that list-valued fields spread across numbered columns."""
    frame = load_report(emit_report(preset("alt3"), tmp_path / "scenario.csv", fmt="csv"))
    assert frame.loc[0, "theta_r_2"] == pytest.approx(3.2)
    assert frame.loc[0, "nu_cens"] == pytest.approx(2.9)


def test_writer_rejects_unknown_format_and_report(tmp_path):
    """Test that unsupported formats and objects are argument errors."""
    writer = ReportWriter()
    with pytest.raises(ArgumentError):
        writer.write(BoundarySet.fixed([5.0]), tmp_path / "x.xml", fmt="xml")
    with pytest.raises(ArgumentError):
        writer.write([1, 2, 3], tmp_path / "x.json")


def test_writer_retries_transient_failures(tmp_path, monkeypatch, no_sleep):
    """Test that a failed rename is retried with backoff and then succeeds."""
    original = Path.replace
    attempts = []

    def flaky_replace(self, target):
        attempts.append(self)
        if len(attempts) == 1:
            raise OSError("device busy")
        return original(self, target)

    monkeypatch.setattr(Path, "replace", flaky_replace)
    writer = ReportWriter(max_retries=3, base_delay=0.5)
    path = writer.write(BoundarySet.fixed([5.0]), tmp_path / "b.json")

    assert path.exists()
    assert len(attempts) == 2
    no_sleep.assert_called_once_with(0.5)
    stats = writer.get_stats()
    assert stats["reports_written"] == 1 and stats["write_errors"] == 1
    assert stats["is_healthy"]


def test_writer_gives_up_after_max_retries(tmp_path, monkeypatch, no_sleep):
    """Test that persistent failures raise ReportWriteError and mark the writer unhealthy."""

    def broken_replace(self, target):
        raise OSError("read-only file system")

    monkeypatch.setattr(Path, "replace", broken_replace)
    writer = ReportWriter(max_retries=3, base_delay=0.1)

    with pytest.raises(ReportWriteError):
        writer.write(BoundarySet.fixed([5.0]), tmp_path / "b.json")
    assert [call.args[0] for call in no_sleep.call_args_list] == pytest.approx([0.1, 0.2])
    assert not writer.health_check()["is_healthy"]
    assert not (tmp_path / "b.json").exists()


def test_load_report_rejects_unreadable_file(tmp_path):
    """Test that a missing or malformed report is an argument error."""
    with pytest.raises(ArgumentError):
        load_report(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ArgumentError):
        load_report(bad)

"""Essential tests for analysis, sequential monitoring, survival curves and OC studies."""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from src.smart_monitor.boundaries import BoundaryMethod, BoundarySet, PsiMatrix, pocock_boundary, sample_joint_T
from src.smart_monitor.errors import ArgumentError, InsufficientDataError
from src.smart_monitor.monitoring import (
    Verdict,
    analysis_cutoffs,
    analyze,
    curves_frame,
    derive_boundaries,
    monitor,
    operating_characteristics,
    survival_curves,
)
from src.smart_monitor.simulation import generate_trial, preset
from src.smart_monitor.statistics import StatisticKind
from src.smart_monitor.trial import emit_csv, final_analysis_time, snapshot
from tests import brute_force
from tests.conftest import make_record


@pytest.fixture(scope="module")
def small_null():
    return replace(preset("null-smart2"), n=200)


@pytest.mark.parametrize("kind", ["LR", "TD"])
def test_analyze_matches_direct_summation(smart1_design, smart1_records, kind):
    """Test that analyze reproduces the brute-force Wald statistic at a cutoff."""
    summary = analyze(smart1_records, smart1_design, t_cal=1.3, kind=kind)

    records = list(snapshot(smart1_records, 1.3).records)
    if kind == "LR":
        z, influence = brute_force.lr(records, smart1_design), brute_force.lr_influence(records, smart1_design)
    else:
        z, influence = brute_force.td(records, smart1_design), brute_force.td_influence(records, smart1_design)
    assert summary.t_value == pytest.approx(brute_force.wald(z, brute_force.sigma(influence), len(records)), rel=1e-6)
    assert summary.cutoff == 1.3
    assert summary.kind is StatisticKind.parse(kind)
    assert summary.events == sum(r.delta for r in records)


def test_analyze_reads_csv_and_defaults_to_full_data(tmp_path, smart2_design, smart2_records):
    """Test that a CSV path is ingested and the default cutoff resolves all follow-up."""
    path = emit_csv(smart2_records, tmp_path / "trial.csv")
    summary = analyze(path, smart2_design)

    assert summary.cutoff == final_analysis_time(smart2_records)
    assert summary.n == len(smart2_records)
    assert summary.info_fraction == 1.0
    assert summary.labels == smart2_design.contrast_labels


def test_analyze_without_events_is_insufficient(smart2_design, smart2_records):
    """Test that a cutoff before the first event cannot be analyzed."""
    with pytest.raises(InsufficientDataError):
        analyze(smart2_records, smart2_design, t_cal=0.6)


def test_monitor_with_infinite_boundaries_accepts(smart2_design, smart2_records):
    """Test that unreachable thresholds continue at the interim and accept at the end."""
    boundaries = BoundarySet.fixed([math.inf, math.inf])
    decisions = monitor(smart2_records, smart2_design, boundaries, [1.0, 2.5])

    assert [d.verdict for d in decisions] == [Verdict.CONTINUE, Verdict.FINAL_ACCEPT]
    assert not any(d.rejects for d in decisions)
    assert decisions[1].events == sum(r.delta for r in smart2_records)
    assert decisions[0].to_dict()["threshold"] == "inf"


def test_monitor_stops_at_first_crossing(smart2_design, smart2_records):
    """Test that a zero threshold stops at the interim and skips the final analysis."""
    decisions = monitor(smart2_records, smart2_design, BoundarySet.fixed([0.0, 0.0]), [1.0, 2.5])

    assert len(decisions) == 1
    assert decisions[0].verdict is Verdict.STOP_FOR_EFFICACY
    assert decisions[0].rejects
    assert decisions[0].t_value > 0


def test_monitor_treats_event_free_interim_as_zero(smart2_design, smart2_records):
    """Test that an interim with no events has T = 0 and continues."""
    decisions = monitor(smart2_records, smart2_design, BoundarySet.fixed([0.0, math.inf]), [0.6, 2.5])

    assert decisions[0].t_value == 0.0 and decisions[0].df == 0
    assert decisions[0].verdict is Verdict.CONTINUE
    assert decisions[1].verdict is Verdict.FINAL_ACCEPT


def test_monitor_validates_analysis_times(smart2_design, smart2_records):
    """Test that times must match the boundaries and increase strictly."""
    boundaries = BoundarySet.fixed([5.0, 5.0])
    with pytest.raises(ArgumentError):
        monitor(smart2_records, smart2_design, boundaries, [1.0])
    with pytest.raises(ArgumentError):
        monitor(smart2_records, smart2_design, boundaries, [1.0, 1.0])


def test_survival_curves_reduce_to_kaplan_meier(smart2_design, two_group_records):
    """Test that without stage 2 each regime's curve is the Kaplan-Meier curve of its arm."""
    curves = {curve.dtr: curve for curve in survival_curves(two_group_records, smart2_design)}

    arm1 = curves["A1B1"]
    assert np.allclose(arm1.times, [0.0, 0.5, 1.2])
    assert np.allclose(arm1.survival, [1.0, 0.8, 0.8 / 3])
    assert arm1.median == pytest.approx(1.2)
    assert np.allclose(curves["A1B2"].survival, arm1.survival)

    arm2 = curves["A2B2"]
    assert np.allclose(arm2.survival, [1.0, 0.8, 0.6, 0.3, 0.0])
    assert arm2.median == pytest.approx(1.5)
    assert arm2.survival_at(1.0) == pytest.approx(0.6)
    assert arm2.survival_at(0.0) == 1.0


def test_survival_curves_are_non_increasing(smart1_design, smart1_records):
    """Test that weighted curves start at 1 and never increase."""
    for curve in survival_curves(smart1_records, smart1_design):
        assert curve.survival[0] == 1.0
        assert np.all(np.diff(curve.survival) <= 1e-12)
        assert np.all((curve.survival >= 0) & (curve.survival <= 1))


def test_survival_curves_without_events_stay_at_one(smart2_design):
    """Test that a cohort with no events yields flat curves without a median."""
    records = [make_record("C1", 0.0, 1, 1.0, 0, eta=0), make_record("C2", 0.0, 2, 2.0, 0)]
    for curve in survival_curves(records, smart2_design):
        assert list(curve.survival) == [1.0]
        assert curve.median is None


def test_curves_frame_scales_time(smart2_design, two_group_records):
    """Test that the long table carries every step and rescales time."""
    curves = survival_curves(two_group_records, smart2_design)
    frame = curves_frame(curves, time_scale=365.25)

    assert list(frame.columns) == ["dtr", "time", "survival", "cumulative_hazard"]
    assert len(frame) == sum(len(curve.times) for curve in curves)
    a1 = frame[frame["dtr"] == "A1B1"]
    assert a1["time"].iloc[1] == pytest.approx(0.5 * 365.25)
    assert a1["cumulative_hazard"].iloc[1] == pytest.approx(-math.log(0.8))


def test_analysis_cutoffs_follow_event_fractions(smart2_records):
    """Test that fraction 1 maps to full data and earlier fractions to event times."""
    cutoffs = analysis_cutoffs(smart2_records, (0.5, 1.0))
    assert cutoffs[1] == final_analysis_time(smart2_records)
    assert cutoffs[0] < cutoffs[1]
    with pytest.raises(InsufficientDataError):
        analysis_cutoffs(smart2_records, (0.5, 0.5))


def test_derive_boundaries_on_simulated_cohort():
    """Test that end-to-end derivation yields Pocock thresholds on the approximation and LD on full data."""
    scenario = replace(preset("null-smart2"), n=1500)
    records = generate_trial(scenario, seed=21, n_jobs=1)

    pocock = derive_boundaries(records, scenario.design, method="pocock", draws=20_000, seed=3, n_jobs=1)
    assert pocock.method is BoundaryMethod.POCOCK and not pocock.oracle
    assert pocock.thresholds[0] == pocock.thresholds[1]
    assert pocock.info_fractions == (0.5, 1.0)
    assert pocock.ranks == (3, 3)

    spending = derive_boundaries(records, scenario.design, method="ld-obf", draws=20_000, seed=3, n_jobs=1)
    assert spending.oracle
    assert spending.thresholds[0] > spending.thresholds[1]

    with pytest.raises(ArgumentError):
        derive_boundaries(records, scenario.design, interim_fractions=(1.2,), draws=1000, n_jobs=1)


def test_oc_with_unreachable_boundaries_never_rejects(small_null):
    """Test that infinite thresholds give zero rejections and the planned sample size."""
    boundaries = BoundarySet.fixed([math.inf, math.inf], info_fractions=(0.5, 1.0))
    report = operating_characteristics(small_null, boundaries, reps=100, seed=4, n_jobs=1)

    assert report.overall == 0.0 and report.rej_interim == 0.0
    assert report.expected_n == small_null.n
    assert report.stop_fractions == (0.0, 0.0)
    assert report.se_expected_n == 0.0


def test_oc_with_zero_boundaries_stops_every_trial_early(small_null):
    """Test that zero thresholds stop every replicate at the interim with fewer subjects."""
    boundaries = BoundarySet.fixed([0.0, 0.0], info_fractions=(0.5, 1.0))
    report = operating_characteristics(small_null, boundaries, reps=100, seed=4, n_jobs=1)

    assert report.rej_interim == 1.0 and report.overall == 1.0
    assert report.rej_final == 0.0
    assert report.expected_n < small_null.n


def test_oc_tallies_are_consistent_and_reproducible(small_null):
    """Test that overall = interim + (1 - interim) * final and that the seed fixes the report."""
    boundaries = BoundarySet.fixed([6.0, 5.0], info_fractions=(0.5, 1.0))
    report = operating_characteristics(small_null, boundaries, kind="TD", reps=120, seed=17, n_jobs=1)

    assert report.overall == pytest.approx(report.rej_interim + (1 - report.rej_interim) * report.rej_final)
    assert sum(report.stop_fractions) == pytest.approx(report.overall)
    assert report == operating_characteristics(small_null, boundaries, kind="TD", reps=120, seed=17, n_jobs=1)
    assert report.to_dict()["kind"] == "TD"


def test_oc_rejects_bad_arguments(small_null):
    """Test that too few replicates or the approximation covariance are argument errors."""
    boundaries = BoundarySet.fixed([5.0, 5.0], info_fractions=(0.5, 1.0))
    with pytest.raises(ArgumentError):
        operating_characteristics(small_null, boundaries, reps=50, n_jobs=1)
    with pytest.raises(ArgumentError):
        operating_characteristics(small_null, boundaries, reps=100, covariance="approximation", n_jobs=1)


@pytest.mark.parametrize("name", ["null-smart2", "alt4"])
def test_single_analysis_monitoring_agrees_with_chi_square_test(name):
    """Test that monitoring once against the M=1 Pocock boundary rejects exactly when T exceeds it."""
    scenario = preset(name)
    records = generate_trial(scenario, seed=8, n_jobs=1)
    final = final_analysis_time(records)
    summary = analyze(records, scenario.design, t_cal=final)

    psi = PsiMatrix(matrix=np.eye(summary.df), ranks=(summary.df,))
    boundary = pocock_boundary(sample_joint_T(psi, b=100_000, seed=5, n_jobs=1), alpha=0.05)
    quantile = stats.chi2.isf(0.05, summary.df)
    assert boundary.thresholds[0] == pytest.approx(quantile, abs=0.15)

    (decision,) = monitor(records, scenario.design, boundary, [final])
    assert decision.rejects == (summary.t_value > boundary.thresholds[0])
    assert decision.verdict in {Verdict.FINAL_REJECT, Verdict.FINAL_ACCEPT}
    if abs(summary.t_value - quantile) > 0.15:
        assert decision.rejects == (summary.p_value < 0.05)

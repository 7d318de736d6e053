"""Essential tests for weighted processes, contrast vectors and the Wald statistic."""

from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from src.smart_monitor.covariance import influence_vectors, sigma_hat
from src.smart_monitor.errors import ArgumentError
from src.smart_monitor.simulation import generate_trial, preset
from src.smart_monitor.statistics import (
    StatisticKind,
    generalized_inverse,
    lr_vector,
    lr_vector_score_form,
    td_vector,
    wald_statistic,
    weighted_processes,
)
from src.smart_monitor.trial import DesignKind, PatientRecord, Regime, SmartDesign, final_analysis_time, snapshot
from tests import brute_force
from tests.conftest import make_record

CUTOFFS = (0.9, 1.3, 10.0)


@pytest.mark.parametrize("cutoff", CUTOFFS)
def test_lr_vector_matches_direct_summation(smart1_design, smart1_records, smart2_design, smart2_records, cutoff):
    """Test that the weighted log-rank vector equals the brute-force sum on both designs."""
    for design, records in ((smart1_design, smart1_records), (smart2_design, smart2_records)):
        view = snapshot(records, cutoff)
        expected = brute_force.lr(list(view.records), design)
        assert np.allclose(lr_vector(view, design), expected, atol=1e-10, rtol=0)


@pytest.mark.parametrize("cutoff", CUTOFFS)
def test_td_vector_matches_direct_summation(smart1_design, smart1_records, smart2_design, smart2_records, cutoff):
    """Test that the Tsiatis-Davidian vector equals the brute-force sum on both designs."""
    for design, records in ((smart1_design, smart1_records), (smart2_design, smart2_records)):
        view = snapshot(records, cutoff)
        expected = brute_force.td(list(view.records), design)
        assert np.allclose(td_vector(view, design), expected, atol=1e-10, rtol=0)


def test_weighted_processes_match_direct_summation(smart1_design, smart1_records):
    """Test that Ȳ and dN̄ of one regime agree with subject-by-subject sums."""
    view = snapshot(smart1_records, 1.3)
    processes = weighted_processes(view, smart1_design, "A2B1C2")
    table = brute_force.processes(list(view.records), smart1_design)

    assert np.allclose(processes.event_times, [row[0] for row in table])
    assert np.allclose(processes.ybar, [row[1]["A2B1C2"] for row in table])
    assert np.allclose(processes.nbar_increments, [row[2]["A2B1C2"] for row in table])
    assert np.allclose(processes.y, [row[3] for row in table])


def test_score_form_equals_log_rank_form(smart1_design, smart1_records):
    """Test that the observed-minus-expected form reproduces the log-rank vector."""
    view = snapshot(smart1_records, 10.0)
    assert np.allclose(lr_vector_score_form(view, smart1_design), lr_vector(view, smart1_design), atol=1e-10)


def test_td_vector_sums_to_zero(smart1_design, smart1_records):
    """Test that the TD contrasts sum to zero across regimes."""
    view = snapshot(smart1_records, 1.3)
    assert td_vector(view, smart1_design).sum() == pytest.approx(0.0, abs=1e-10)


def test_single_stage_design_reduces_to_two_sample_log_rank(two_group_records):
    """Test that with nobody reaching stage 2 the A2 contrast is (1/ell) times observed minus expected."""
    design = SmartDesign(kind=DesignKind.SMART2)
    view = snapshot(two_group_records, 10.0)

    observed_minus_expected = 0.0
    for s in sorted({r.u for r in two_group_records if r.delta == 1}):
        at_risk = [r for r in two_group_records if r.u >= s]
        deaths = [r for r in at_risk if r.u == s and r.delta == 1]
        arm2_risk = sum(r.a == 2 for r in at_risk)
        arm2_deaths = sum(r.a == 2 for r in deaths)
        observed_minus_expected += arm2_deaths - len(deaths) * arm2_risk / len(at_risk)

    z = dict(zip(design.contrast_labels, lr_vector(view, design), strict=True))
    assert z["A2B1"] == pytest.approx(2.0 * observed_minus_expected, abs=1e-10)
    assert z["A2B2"] == pytest.approx(z["A2B1"], abs=1e-10)
    assert z["A1B2"] == pytest.approx(0.0, abs=1e-10)


def test_identical_groups_give_zero_contrasts():
    """Test that mirror-image arms produce a zero log-rank vector."""
    design = SmartDesign(kind=DesignKind.SMART2)
    records = []
    for a in (1, 2):
        records += [
            make_record(f"{a}-1", 0.0, a, 0.5, 1, eta=0),
            make_record(f"{a}-2", 0.0, a, 0.8, 1, eta=1, t1=0.2, r=1, b=1),
            make_record(f"{a}-3", 0.0, a, 0.8, 1, eta=1, t1=0.2, r=1, b=2),
            make_record(f"{a}-4", 0.0, a, 1.0, 0, eta=1, t1=0.4, r=0),
        ]
    view = snapshot(records, 10.0)
    z = lr_vector(view, design)
    assert np.allclose(z, 0.0, atol=1e-12)


def test_relabeling_arms_permutes_contrasts(smart1_design, smart1_records):
    """Test that swapping arm labels together with the reference permutes Z and leaves T unchanged."""
    swapped_design = smart1_design.swapped()
    swapped_records = [
        PatientRecord(
            id=r.id,
            enroll_time=r.enroll_time,
            a=3 - r.a,
            u=r.u,
            delta=r.delta,
            eta=r.eta,
            t1=r.t1,
            r=r.r,
            b=None if r.b is None else 3 - r.b,
            c=None if r.c is None else 3 - r.c,
        )
        for r in smart1_records
    ]
    view, swapped_view = snapshot(smart1_records, 10.0), snapshot(swapped_records, 10.0)
    z = dict(zip(smart1_design.contrast_labels, lr_vector(view, smart1_design), strict=True))
    z_swapped = dict(zip(swapped_design.contrast_labels, lr_vector(swapped_view, swapped_design), strict=True))

    for label, value in z.items():
        assert z_swapped[Regime.parse(label).swapped().label] == pytest.approx(value, abs=1e-10)

    t = wald_statistic(lr_vector(view, smart1_design), sigma_hat(influence_vectors(view, smart1_design)), view.n)
    t_swapped = wald_statistic(
        lr_vector(swapped_view, swapped_design),
        sigma_hat(influence_vectors(swapped_view, swapped_design)),
        swapped_view.n,
    )
    assert t_swapped.t_value == pytest.approx(t.t_value, rel=1e-6)


def test_duplicating_records_doubles_z_and_t(smart2_design, smart2_records):
    """Test that duplicating every subject doubles Z and T and leaves sigma unchanged."""
    doubled = smart2_records + [replace(r, id=r.id + "b") for r in smart2_records]
    view, doubled_view = snapshot(smart2_records, 10.0), snapshot(doubled, 10.0)

    z, z2 = lr_vector(view, smart2_design), lr_vector(doubled_view, smart2_design)
    sigma, sigma2 = (sigma_hat(influence_vectors(v, smart2_design)) for v in (view, doubled_view))
    assert np.allclose(z2, 2 * z, atol=1e-10)
    assert np.allclose(sigma2, sigma, atol=1e-10)

    t, t2 = wald_statistic(z, sigma, view.n), wald_statistic(z2, sigma2, doubled_view.n)
    assert t2.t_value == pytest.approx(2 * t.t_value, rel=1e-6)


def test_generalized_inverse_drops_small_eigenvalues():
    """Test that the spectral pseudo-inverse reports the retained rank and inverts on it."""
    basis, _ = np.linalg.qr(np.random.default_rng(3).normal(size=(4, 4)))
    m = basis @ np.diag([4.0, 2.0, 1.0, 1e-12]) @ basis.T
    ginv, rank = generalized_inverse(m, tol=1e-8)

    assert rank == 3
    assert np.allclose(m @ ginv @ m, m, atol=1e-10)


def test_generalized_inverse_rejects_asymmetric_input():
    """Test that a non-symmetric matrix is an argument error."""
    with pytest.raises(ArgumentError):
        generalized_inverse(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_wald_statistic_on_identity():
    """Test that T = |z|^2 / n with full df on an identity covariance."""
    summary = wald_statistic(np.array([1.0, 2.0, 2.0]), np.eye(3), n=3, kind="LR")
    assert summary.t_value == pytest.approx(3.0)
    assert summary.df == 3
    assert summary.p_value == pytest.approx(stats.chi2.sf(3.0, 3))
    assert summary.kind is StatisticKind.LR


def test_wald_statistic_on_zero_covariance_is_zero():
    """Test that a null covariance gives T = 0 with no degrees of freedom."""
    summary = wald_statistic(np.zeros(3), np.zeros((3, 3)), n=10)
    assert summary.t_value == 0.0 and summary.df == 0 and summary.p_value == 1.0


@pytest.mark.parametrize("kind", ["LR", "TD"])
def test_wald_statistic_matches_direct_summation(smart1_design, smart1_records, kind):
    """Test the whole pipeline against the brute-force influence vectors and pseudo-inverse."""
    view = snapshot(smart1_records, 1.3)
    records = list(view.records)
    if kind == "LR":
        z, influence = brute_force.lr(records, smart1_design), brute_force.lr_influence(records, smart1_design)
        z_fast = lr_vector(view, smart1_design)
    else:
        z, influence = brute_force.td(records, smart1_design), brute_force.td_influence(records, smart1_design)
        z_fast = td_vector(view, smart1_design)

    sigma = sigma_hat(influence_vectors(view, smart1_design, kind))
    assert np.allclose(sigma, brute_force.sigma(influence), atol=1e-10)

    summary = wald_statistic(z_fast, sigma, view.n, kind=kind)
    assert summary.t_value == pytest.approx(brute_force.wald(z, brute_force.sigma(influence), view.n), rel=1e-6)


@pytest.mark.slow
def test_null_log_rank_components_center_on_zero():
    """Test that each SMART1 log-rank component averages to 0 within 3 Monte Carlo standard errors."""
    scenario = preset("null-smart1")
    values = []
    for seed in range(1000):
        records = generate_trial(scenario, seed=seed, n_jobs=1)
        view = snapshot(records, final_analysis_time(records))
        values.append(lr_vector(view, scenario.design) / np.sqrt(view.n))
    values = np.array(values)

    standard_errors = values.std(axis=0, ddof=1) / np.sqrt(len(values))
    assert values.shape == (1000, 7)
    assert np.all(np.abs(values.mean(axis=0)) <= 3 * standard_errors)

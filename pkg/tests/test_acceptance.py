"""Table-scale Monte Carlo checks of boundaries, degrees of freedom and operating characteristics.

Deselected by default; run with ``pytest -m slow``.
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from src.smart_monitor.boundaries import BoundarySet
from src.smart_monitor.monitoring import analyze, derive_boundaries, operating_characteristics
from src.smart_monitor.simulation import generate_trial, preset

pytestmark = pytest.mark.slow

DRAWS = 100_000


@pytest.fixture(scope="module")
def null_cohorts():
    cohorts = {}
    for name in ("null-smart1", "null-smart2"):
        scenario = replace(preset(name), n=10_000)
        cohorts[name] = (scenario.design, generate_trial(scenario, seed=20240601, n_jobs=-1))
    return cohorts


@pytest.mark.parametrize(
    ("name", "method", "expected", "tolerance"),
    [
        ("null-smart2", "pocock", (9.38, 9.38), 0.3),
        ("null-smart2", "obf", (11.10, 7.85), 0.3),
        ("null-smart1", "pocock", (15.98, 15.98), 0.4),
        ("null-smart1", "obf", (19.80, 14.00), 0.4),
        ("null-smart1", "ld-pocock", (15.43, 16.14), 0.4),
        ("null-smart1", "ld-obf", (20.03, 14.22), 0.4),
    ],
)
def test_boundaries_reproduce_published_values(null_cohorts, name, method, expected, tolerance):
    """Test that log-rank boundaries at 50% information match the published values."""
    design, records = null_cohorts[name]
    boundary = derive_boundaries(records, design, method=method, draws=DRAWS, seed=7, n_jobs=-1)

    assert boundary.thresholds == pytest.approx(expected, abs=tolerance)
    if method == "obf":
        assert boundary.thresholds[0] / boundary.thresholds[1] == pytest.approx(math.sqrt(2), rel=1e-12)


@pytest.mark.parametrize("name", ["null-smart1", "null-smart2"])
def test_oracle_and_approximation_boundaries_agree(null_cohorts, name):
    """Test that full-data and interim-only Pocock boundaries differ by at most 0.6."""
    design, records = null_cohorts[name]
    approximate = derive_boundaries(records, design, draws=DRAWS, seed=7, n_jobs=-1)
    oracle = derive_boundaries(records, design, draws=DRAWS, seed=7, oracle=True, n_jobs=-1)
    assert abs(approximate.thresholds[0] - oracle.thresholds[0]) <= 0.6


@pytest.mark.parametrize(
    ("name", "kind", "df"),
    [("null-smart1", "LR", 7), ("null-smart1", "TD", 5), ("null-smart2", "LR", 3), ("null-smart2", "TD", 3)],
)
def test_covariance_rank_matches_nominal_df(null_cohorts, name, kind, df):
    """Test that the estimated covariance has the expected number of degrees of freedom."""
    design, records = null_cohorts[name]
    summary = analyze(records, design, kind=kind)
    assert summary.df == df == design.nominal_df(kind)


def test_null_statistic_follows_chi_square():
    """Test that the 95th percentile of T under the SMART2 null is close to the chi-square quantile."""
    scenario = preset("null-smart2")
    values = [analyze(generate_trial(scenario, seed=seed, n_jobs=1), scenario.design).t_value for seed in range(1000)]
    assert np.quantile(values, 0.95) == pytest.approx(stats.chi2.isf(0.05, 3), abs=0.5)


@pytest.mark.parametrize(
    ("name", "thresholds", "overall", "tolerance", "expected_n"),
    [
        ("null-smart1", (19.80, 14.00), 0.043, 0.02, None),
        ("null-smart2", (9.38, 9.38), 0.054, 0.02, None),
        ("alt1", (19.80, 14.00), 0.78, 0.04, (466, 10)),
        ("alt4", (11.10, 7.85), 0.90, 0.04, (435, 12)),
    ],
)
def test_operating_characteristics_match_published_rates(name, thresholds, overall, tolerance, expected_n):
    """Test type I error, power and expected sample size at 1000 replicates with published boundaries."""
    boundaries = BoundarySet.fixed(thresholds, alpha=0.05, info_fractions=(0.5, 1.0))
    report = operating_characteristics(preset(name), boundaries, reps=1000, seed=11, n_jobs=-1)

    assert report.overall == pytest.approx(overall, abs=tolerance)
    if expected_n is not None:
        target, slack = expected_n
        assert report.expected_n == pytest.approx(target, abs=slack)

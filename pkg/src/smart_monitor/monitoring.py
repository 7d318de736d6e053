"""Interim-analysis workflows: analysis, sequential monitoring, survival curves, boundaries, and OC studies."""

import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .boundaries import BoundaryMethod, BoundarySet, psi_matrix, sample_joint_T, solve_boundaries
from .config import Config
from .covariance import (
    CovarianceMethod,
    approximate_blocks,
    bootstrap_blocks,
    influence_vectors,
    linearized_blocks,
    sigma_hat,
)
from .errors import ArgumentError, InsufficientDataError, InternalContradictionError
from .simulation import ScenarioConfig, cohort_seeds, generate_trial
from .statistics import (
    StatisticKind,
    TestSummary,
    cohort_processes,
    contrast_labels,
    contrast_vector,
    safe_ratio,
    wald_statistic,
)
from .trial import (
    AnalysisSnapshot,
    PatientRecord,
    SmartDesign,
    final_analysis_time,
    find_interim_time,
    load_records,
    snapshot,
)

logger = Config.get_logger(__name__)

MIN_OC_REPS = 100

DataSource = Path | str | Sequence[PatientRecord]


def analyze_snapshot(
    view: AnalysisSnapshot,
    design: SmartDesign,
    kind: StatisticKind | str = StatisticKind.LR,
    tol: float | None = None,
    sigma: np.ndarray | None = None,
) -> TestSummary:
    """Wald test on one snapshot, normalized by linearization unless sigma is supplied.

    Raises:
        InsufficientDataError: If the snapshot holds no events
    """
    kind = StatisticKind.parse(kind)
    if view.events == 0:
        raise InsufficientDataError(f"No events observed by t={view.cutoff:.4f}; the statistic is undefined")
    z = contrast_vector(view, design, kind)
    if sigma is None:
        sigma = sigma_hat(influence_vectors(view, design, kind))
    summary = wald_statistic(
        z,
        sigma,
        view.n,
        tol=tol,
        kind=kind,
        labels=contrast_labels(design, kind),
        nominal_df=design.nominal_df(kind.value),
    )
    return replace(summary, cutoff=view.cutoff, events=view.events, info_fraction=view.info_fraction)


def analyze(
    data: DataSource,
    design: SmartDesign,
    t_cal: float | None = None,
    kind: StatisticKind | str = StatisticKind.LR,
    tol: float | None = None,
    **ingest_options: Any,
) -> TestSummary:
    """Interim or final analysis of a dataset at calendar time t_cal.

    Args:
        data: CSV path or loaded records
        design: Randomization structure
        t_cal: Calendar cutoff; defaults to the time all follow-up is resolved
        kind: Statistic family
        tol: Relative eigenvalue cutoff of the generalized inverse
        **ingest_options: Passed to ingest_csv when data is a path

    Returns:
        TestSummary with Z, sigma_hat, T, df and the chi-square p-value
    """
    records = load_records(data, design, **ingest_options)
    cutoff = final_analysis_time(records) if t_cal is None else t_cal
    summary = analyze_snapshot(snapshot(records, cutoff), design, kind, tol)
    logger.info(
        "%s analysis at t=%.4f: n=%d, events=%d, T=%.4f, df=%d, p=%.4g",
        summary.kind.value,
        cutoff,
        summary.n,
        summary.events,
        summary.t_value,
        summary.df,
        summary.p_value,
    )
    return summary


class Verdict(Enum):
    STOP_FOR_EFFICACY = "stop-for-efficacy"
    CONTINUE = "continue"
    FINAL_REJECT = "final-reject"
    FINAL_ACCEPT = "final-accept"


@dataclass(frozen=True)
class Decision:
    """Outcome of one look at the data."""

    analysis: int
    cutoff: float
    t_value: float
    threshold: float
    verdict: Verdict
    n: int
    events: int
    df: int

    @property
    def rejects(self) -> bool:
        return self.verdict in (Verdict.STOP_FOR_EFFICACY, Verdict.FINAL_REJECT)

    def to_dict(self) -> dict[str, Any]:
        return {
            "analysis": self.analysis,
            "cutoff": self.cutoff,
            "t_value": self.t_value,
            "threshold": "inf" if math.isinf(self.threshold) else self.threshold,
            "verdict": self.verdict.value,
            "n": self.n,
            "events": self.events,
            "df": self.df,
        }


def monitor(
    data: DataSource,
    design: SmartDesign,
    boundaries: BoundarySet,
    analysis_times: Sequence[float],
    kind: StatisticKind | str = StatisticKind.LR,
    tol: float | None = None,
    **ingest_options: Any,
) -> list[Decision]:
    """Run the group-sequential procedure, stopping at the first T > b.

    An analysis with no events yet has T = 0 and continues.

    Args:
        data: CSV path or loaded records
        design: Randomization structure
        boundaries: One threshold per analysis
        analysis_times: Strictly increasing calendar cutoffs
        kind: Statistic family
        tol: Relative eigenvalue cutoff of the generalized inverse

    Returns:
        Decisions up to and including the stopping analysis

    Raises:
        ArgumentError: If the times are not increasing or do not match the boundaries
    """
    times = tuple(float(t) for t in analysis_times)
    if len(times) != boundaries.analyses:
        raise ArgumentError(f"Got {len(times)} analysis times for {boundaries.analyses} boundaries")
    if any(later <= earlier for earlier, later in zip(times, times[1:], strict=False)):
        raise ArgumentError(f"Analysis times must be strictly increasing (got {times})")

    records = load_records(data, design, **ingest_options)
    last = len(times) - 1
    decisions: list[Decision] = []
    for m, cutoff in enumerate(times):
        view = snapshot(records, cutoff)
        if view.events == 0:
            logger.warning("Analysis %d at t=%.4f has no events; treating T as 0", m + 1, cutoff)
            t_value, df = 0.0, 0
        else:
            summary = analyze_snapshot(view, design, kind, tol)
            t_value, df = summary.t_value, summary.df

        threshold = boundaries.thresholds[m]
        crossed = t_value > threshold
        if m < last:
            verdict = Verdict.STOP_FOR_EFFICACY if crossed else Verdict.CONTINUE
        else:
            verdict = Verdict.FINAL_REJECT if crossed else Verdict.FINAL_ACCEPT
        decisions.append(
            Decision(
                analysis=m + 1,
                cutoff=cutoff,
                t_value=t_value,
                threshold=threshold,
                verdict=verdict,
                n=view.n,
                events=view.events,
                df=df,
            )
        )
        logger.info("Analysis %d: T=%.4f vs b=%.4f -> %s", m + 1, t_value, threshold, verdict.value)
        if crossed:
            break
    return decisions


@dataclass(frozen=True)
class SurvivalCurve:
    """Weighted risk-set survival estimate of one regime.

    ``times`` starts at 0 with survival 1 and then lists the regime's event times.
    """

    dtr: str
    times: np.ndarray
    survival: np.ndarray
    median: float | None

    @property
    def cumulative_hazard(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return -np.log(self.survival)

    def survival_at(self, t: float) -> float:
        return float(self.survival[np.searchsorted(self.times, t, side="right") - 1])


def survival_curves(
    data: DataSource,
    design: SmartDesign,
    t_cal: float | None = None,
    **ingest_options: Any,
) -> list[SurvivalCurve]:
    """Product-limit curves Π(1 - dN̄/Ȳ) for every embedded regime.

    Args:
        data: CSV path or loaded records
        design: Randomization structure
        t_cal: Calendar cutoff; defaults to full data

    Returns:
        One curve per regime, in catalog order
    """
    records = load_records(data, design, **ingest_options)
    cutoff = final_analysis_time(records) if t_cal is None else t_cal
    processes = cohort_processes(snapshot(records, cutoff), design)

    curves = []
    for column, label in enumerate(processes.labels):
        events, at_risk = processes.dnbar[:, column], processes.ybar[:, column]
        if np.any((at_risk == 0) & (events > 0)):
            raise InternalContradictionError(f"{label}: weighted events without weighted subjects at risk")

        steps = events > 0
        survival = np.clip(np.cumprod(1.0 - safe_ratio(events[steps], at_risk[steps])), 0.0, 1.0)
        times = np.concatenate([[0.0], processes.times[steps]])
        survival = np.concatenate([[1.0], survival])
        below = np.flatnonzero(survival <= 0.5)
        median = float(times[below[0]]) if len(below) else None
        curves.append(SurvivalCurve(dtr=label, times=times, survival=survival, median=median))
        logger.debug("%s: %d steps, median %s", label, int(steps.sum()), median)
    return curves


def curves_frame(curves: Sequence[SurvivalCurve], time_scale: float = 1.0) -> pd.DataFrame:
    """Long-format step-function table (dtr, time, survival, cumulative_hazard) for plotting."""
    frames = [
        pd.DataFrame(
            {
                "dtr": curve.dtr,
                "time": curve.times * time_scale,
                "survival": curve.survival,
                "cumulative_hazard": curve.cumulative_hazard,
            }
        )
        for curve in curves
    ]
    return pd.concat(frames, ignore_index=True)


def analysis_cutoffs(records: Sequence[PatientRecord], info_fractions: Sequence[float]) -> tuple[float, ...]:
    """Calendar cutoffs reaching each information fraction; a fraction of 1 means full data."""
    cutoffs = tuple(
        final_analysis_time(records) if math.isclose(f, 1.0) else find_interim_time(records, f)
        for f in info_fractions
    )
    if any(later <= earlier for earlier, later in zip(cutoffs, cutoffs[1:], strict=False)):
        raise InsufficientDataError(f"Information fractions {tuple(info_fractions)} do not separate the analyses")
    return cutoffs


def derive_boundaries(
    data: DataSource,
    design: SmartDesign,
    kind: StatisticKind | str = StatisticKind.LR,
    method: BoundaryMethod | str = BoundaryMethod.POCOCK,
    alpha: float | None = None,
    interim_fractions: Sequence[float] = (0.5,),
    draws: int | None = None,
    seed: int | None = None,
    oracle: bool = False,
    tol: float | None = None,
    n_jobs: int | None = None,
) -> BoundarySet:
    """End-to-end boundary derivation on a dataset.

    Locates the analyses at the interim fractions and at full data, estimates
    covariance blocks (full data when oracle, otherwise the interim-only
    approximation), builds Ψ, samples it, and solves for the method.
    Error-spending methods always use full-data blocks.

    Args:
        data: CSV path or loaded records, typically a large simulated null cohort
        design: Randomization structure
        kind: Statistic family
        method: Boundary family
        alpha: Overall level
        interim_fractions: Information fractions of the interim analyses
        draws: Monte Carlo draws
        seed: Root seed of the draws
        oracle: Use full-data covariance at every analysis
        tol: Relative eigenvalue cutoff
        n_jobs: Thread count for drawing
    """
    kind = StatisticKind.parse(kind)
    method = BoundaryMethod.parse(method)
    if method.spending is not None and not oracle:
        logger.info("Error-spending boundaries use full-data covariance at every analysis")
        oracle = True

    records = load_records(data, design)
    fractions = (*(float(f) for f in interim_fractions), 1.0)
    if any(not 0 < f < 1 for f in fractions[:-1]):
        raise ArgumentError(f"Interim fractions must lie in (0, 1) (got {tuple(interim_fractions)})")
    cutoffs = analysis_cutoffs(records, fractions)
    views = [snapshot(records, cutoff) for cutoff in cutoffs]

    start = time.time()
    if oracle:
        blocks = linearized_blocks([influence_vectors(view, design, kind) for view in views])
    else:
        blocks = approximate_blocks(influence_vectors(views[0], design, kind), [view.events for view in views])
    psi = psi_matrix(blocks, tol=tol, info_fractions=fractions)
    sample = sample_joint_T(psi, b=draws, seed=seed, n_jobs=n_jobs)
    result = solve_boundaries(sample, method, alpha, oracle=oracle)
    logger.info("Derived %s boundaries in %.1fs: %s", result.label, time.time() - start, result.thresholds)
    return result


@dataclass(frozen=True)
class OcReport:
    """Operating characteristics of a monitored design under one scenario.

    Attributes:
        rej_interim: Share of replicates stopping before the final analysis
        rej_final: Share rejecting at the final analysis among those reaching it
        overall: Share rejecting at any analysis (type I error or power)
        stop_fractions: Share stopping at each analysis
        expected_n: Mean enrolled count at stopping
    """

    scenario: str
    method: str
    kind: StatisticKind
    covariance: CovarianceMethod
    reps: int
    seed: int
    planned_n: int
    thresholds: tuple[float, ...]
    info_fractions: tuple[float, ...]
    rej_interim: float
    rej_final: float
    overall: float
    stop_fractions: tuple[float, ...]
    expected_n: float
    se_interim: float
    se_overall: float
    se_expected_n: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "method": self.method,
            "kind": self.kind.value,
            "covariance": self.covariance.value,
            "reps": self.reps,
            "seed": self.seed,
            "planned_n": self.planned_n,
            "thresholds": ["inf" if math.isinf(x) else x for x in self.thresholds],
            "info_fractions": list(self.info_fractions),
            "rej_interim": self.rej_interim,
            "rej_final": self.rej_final,
            "overall": self.overall,
            "stop_fractions": list(self.stop_fractions),
            "expected_n": self.expected_n,
            "se_interim": self.se_interim,
            "se_overall": self.se_overall,
            "se_expected_n": self.se_expected_n,
        }


def _oc_replicate(
    index: int,
    scenario: ScenarioConfig,
    boundaries: BoundarySet,
    kind: StatisticKind,
    trial_seed: int,
    covariance: CovarianceMethod,
    bootstrap_reps: int | None,
    tol: float | None,
) -> tuple[int, int]:
    """Simulate and monitor one trial; returns (stopping analysis or -1, enrolled at stop)."""
    records = generate_trial(scenario, seed=trial_seed, n_jobs=1)
    try:
        cutoffs = analysis_cutoffs(records, boundaries.info_fractions)
    except InsufficientDataError as e:
        raise InsufficientDataError(f"Replicate {index} (seed {trial_seed}) of {scenario.label}: {e}") from e

    sigmas: Sequence[np.ndarray | None] = [None] * len(cutoffs)
    if covariance is CovarianceMethod.BOOTSTRAP:
        blocks = bootstrap_blocks(records, cutoffs, scenario.design, kind, b=bootstrap_reps, seed=trial_seed, n_jobs=1)
        sigmas = blocks.sigma

    for m, cutoff in enumerate(cutoffs):
        view = snapshot(records, cutoff)
        if view.events == 0:
            continue
        summary = analyze_snapshot(view, scenario.design, kind, tol, sigma=sigmas[m])
        if summary.t_value > boundaries.thresholds[m]:
            return m, view.n
    return -1, len(records)


def operating_characteristics(
    scenario: ScenarioConfig,
    boundaries: BoundarySet,
    kind: StatisticKind | str = StatisticKind.LR,
    reps: int = 1000,
    seed: int | None = None,
    covariance: CovarianceMethod | str = CovarianceMethod.LINEARIZATION,
    bootstrap_reps: int | None = None,
    tol: float | None = None,
    n_jobs: int | None = None,
) -> OcReport:
    """Rejection rates and expected sample size of the monitored design.

    Each replicate simulates a trial, places its interims at the realized
    event-fraction calendar times, and applies the fixed boundaries.

    Args:
        scenario: Data-generating scenario
        boundaries: Thresholds and information fractions to monitor with
        kind: Statistic family
        reps: Number of simulated trials (at least 100)
        seed: Root seed; replicate seeds are spawned from it
        covariance: "linearization" or "bootstrap" normalization of T
        bootstrap_reps: Bootstrap replicates per trial when covariance is bootstrap
        tol: Relative eigenvalue cutoff
        n_jobs: Process count for replicates (defaults to Config.N_JOBS)

    Returns:
        OcReport with Monte Carlo standard errors
    """
    kind = StatisticKind.parse(kind)
    covariance = CovarianceMethod.parse(covariance)
    if covariance is CovarianceMethod.APPROXIMATION:
        raise ArgumentError("OC studies normalize with linearization or bootstrap covariance")
    if reps < MIN_OC_REPS:
        raise ArgumentError(f"reps must be at least {MIN_OC_REPS} (got {reps})")
    seed = Config.DEFAULT_SEED if seed is None else int(seed)
    n_jobs = Config.N_JOBS if n_jobs is None else n_jobs

    start = time.time()
    seeds = cohort_seeds(seed, reps)
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_oc_replicate)(i, scenario, boundaries, kind, trial_seed, covariance, bootstrap_reps, tol)
        for i, trial_seed in enumerate(seeds)
    )

    analyses = boundaries.analyses
    stops = np.array([stop for stop, _ in outcomes])
    enrolled = np.array([n for _, n in outcomes], dtype=float)
    stop_counts = np.array([(stops == m).sum() for m in range(analyses)])

    interim_stops = int(stop_counts[:-1].sum())
    final_rejections = int(stop_counts[-1])
    reached_final = reps - interim_stops
    rej_interim = interim_stops / reps
    overall = (interim_stops + final_rejections) / reps
    rej_final = final_rejections / reached_final if reached_final else 0.0

    report = OcReport(
        scenario=scenario.label,
        method=boundaries.label,
        kind=kind,
        covariance=covariance,
        reps=reps,
        seed=seed,
        planned_n=scenario.n,
        thresholds=boundaries.thresholds,
        info_fractions=boundaries.info_fractions,
        rej_interim=rej_interim,
        rej_final=rej_final,
        overall=overall,
        stop_fractions=tuple(float(x) for x in stop_counts / reps),
        expected_n=float(enrolled.mean()),
        se_interim=math.sqrt(rej_interim * (1 - rej_interim) / reps),
        se_overall=math.sqrt(overall * (1 - overall) / reps),
        se_expected_n=float(enrolled.std(ddof=1) / math.sqrt(reps)),
    )
    logger.info(
        "OC %s %s %s: interim %.3f, final %.3f, overall %.3f, E(n)=%.1f (%d reps, %.1fs)",
        scenario.label,
        boundaries.label,
        kind.value,
        rej_interim,
        rej_final,
        overall,
        report.expected_n,
        reps,
        time.time() - start,
    )
    return report

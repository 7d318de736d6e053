"""Within- and cross-analysis covariance of the contrast vectors.

Two estimators are provided: asymptotic linearization through per-subject
influence vectors, and a nonparametric bootstrap that resamples whole
subjects and re-applies the calendar cutoffs.
"""

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from joblib import Parallel, delayed

from .config import Config
from .errors import AlignmentError, ArgumentError, EmptySnapshotError, InfeasibleError, InsufficientDataError
from .statistics import (
    StatisticKind,
    cohort_processes,
    contrast_labels,
    contrast_vector,
    prefix_sums,
    safe_ratio,
    td_hazard,
)
from .trial import AnalysisSnapshot, PatientRecord, SmartDesign, snapshot

logger = Config.get_logger(__name__)

MAX_REDRAWS = 20


class CovarianceMethod(Enum):
    LINEARIZATION = "linearization"
    BOOTSTRAP = "bootstrap"
    APPROXIMATION = "independent-increment-approximation"

    @classmethod
    def parse(cls, value: "str | CovarianceMethod") -> "CovarianceMethod":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as e:
            choices = ", ".join(member.value for member in cls)
            raise ArgumentError(f"Unknown covariance method {value!r}; expected one of {choices}") from e


@dataclass(frozen=True)
class InfluenceSet:
    """Per-subject influence vectors of a contrast at one analysis.

    Attributes:
        ids: Subject ids in row order
        vectors: (n, p) matrix whose column sums reproduce the contrast vector
        kind: Statistic family
        labels: Component labels
        cutoff: Calendar time of the analysis
    """

    ids: tuple[str, ...]
    vectors: np.ndarray
    kind: StatisticKind
    labels: tuple[str, ...]
    cutoff: float

    @property
    def n(self) -> int:
        return len(self.ids)

    def total(self) -> np.ndarray:
        return self.vectors.sum(axis=0)


def _integrate_weighted(
    times: np.ndarray,
    increments: np.ndarray,
    before: np.ndarray,
    after: np.ndarray,
    t1: np.ndarray,
    u: np.ndarray,
) -> np.ndarray:
    """Σ_{s <= u_i} W_i(s) g(s) for every subject, with W_i stepping from before to after at t1."""
    cumulative = prefix_sums(increments)
    up_to_exit = cumulative[np.searchsorted(times, u, side="right")]
    before_jump = cumulative[np.searchsorted(times, t1, side="left")]
    jumped = (t1 <= u)[:, None]
    pre = np.where(jumped, before_jump, up_to_exit)
    post = np.where(jumped, up_to_exit - before_jump, 0.0)
    return before * pre + after * post


def influence_vectors(
    snapshot: AnalysisSnapshot,
    design: SmartDesign,
    kind: StatisticKind | str = StatisticKind.LR,
) -> InfluenceSet:
    """Linearization terms Ẑ_i(t) of the contrast vector.

    LR terms integrate [Ȳ_ref W_d - Ȳ_d W_ref] / (Ȳ_d + Ȳ_ref) against the
    pooled Nelson-Aalen residual dN_i - Y_i dN/Y. TD terms integrate
    W_d - π_d Σ W against the residual under the TD pooled hazard.

    Args:
        snapshot: Data visible at the analysis
        design: Randomization structure
        kind: Statistic family

    Returns:
        InfluenceSet whose rows sum exactly to the contrast vector
    """
    kind = StatisticKind.parse(kind)
    processes = cohort_processes(snapshot, design)
    cohort = processes.cohort
    before, after = processes.weights.before, processes.weights.after
    times, t1, u = processes.times, cohort.t1, cohort.u

    events = cohort.delta == 1
    rows = processes.event_index[events]
    exit_weights = processes.weights_at_exit()[events]
    event_part = np.zeros_like(before)

    if kind is StatisticKind.LR:
        ref = design.reference_index
        pooled_risk = processes.ybar + processes.ybar[:, [ref]]
        coef_own = safe_ratio(np.broadcast_to(processes.ybar[:, [ref]], pooled_risk.shape), pooled_risk)
        coef_ref = safe_ratio(processes.ybar, pooled_risk)
        d_lambda = safe_ratio(processes.dn, processes.y)[:, None]

        event_part[events] = coef_own[rows] * exit_weights - coef_ref[rows] * exit_weights[:, [ref]]
        own = _integrate_weighted(times, coef_own * d_lambda, before, after, t1, u)
        against = _integrate_weighted(times, coef_ref * d_lambda, before[:, [ref]], after[:, [ref]], t1, u)
        compensator = own - against
        vectors = np.delete(event_part - compensator, ref, axis=1)
    else:
        d_lambda = td_hazard(processes)[:, None]
        share = safe_ratio(processes.ybar, processes.ybar.sum(axis=1, keepdims=True))
        total_before = before.sum(axis=1, keepdims=True)
        total_after = after.sum(axis=1, keepdims=True)

        event_part[events] = exit_weights - share[rows] * exit_weights.sum(axis=1, keepdims=True)
        own = _integrate_weighted(times, d_lambda, before, after, t1, u)
        pooled = _integrate_weighted(times, share * d_lambda, total_before, total_after, t1, u)
        compensator = own - pooled
        vectors = event_part - compensator

    return InfluenceSet(
        ids=cohort.ids,
        vectors=vectors,
        kind=kind,
        labels=contrast_labels(design, kind),
        cutoff=snapshot.cutoff,
    )


def sigma_hat(influence: InfluenceSet) -> np.ndarray:
    """Covariance estimate n^{-1} Σ_i Ẑ_i Ẑ_i' of n^{-1/2} Z(t).

    Raises:
        InsufficientDataError: If fewer than two subjects contribute
    """
    if influence.n < 2:
        raise InsufficientDataError(f"sigma_hat needs at least 2 subjects (got {influence.n})")
    sigma = influence.vectors.T @ influence.vectors / influence.n
    return (sigma + sigma.T) / 2


def cross_cov(influence_m: InfluenceSet, influence_later: InfluenceSet) -> np.ndarray:
    """Estimate cov(n_m^{-1/2} Z(t_m), n_m'^{-1/2} Z(t_m')) from aligned influence vectors.

    Args:
        influence_m: Influence at the earlier analysis
        influence_later: Influence at the later analysis; must cover every earlier id

    Returns:
        (p, p) cross-covariance block

    Raises:
        AlignmentError: If dimensions differ or an earlier id is missing later
    """
    if influence_m.vectors.shape[1] != influence_later.vectors.shape[1]:
        raise AlignmentError(
            f"Influence dimensions differ: {influence_m.vectors.shape[1]} vs {influence_later.vectors.shape[1]}"
        )
    position = {subject: row for row, subject in enumerate(influence_later.ids)}
    missing = [subject for subject in influence_m.ids if subject not in position]
    if missing:
        raise AlignmentError(f"{len(missing)} subjects of the earlier analysis are absent later (e.g. {missing[0]!r})")

    matched = influence_later.vectors[[position[subject] for subject in influence_m.ids]]
    return influence_m.vectors.T @ matched / np.sqrt(influence_m.n * influence_later.n)


def approx_final_cov(sigma_interim: np.ndarray, n_interim: int, n_final: int) -> np.ndarray:
    """Working final covariance under independent increments.

    Returns (n_final / n_interim) * sigma_interim, the covariance of Z(t_final)
    expressed per interim unit. The counts measure statistical information;
    boundary derivation passes observed events.

    Raises:
        ArgumentError: If n_final < n_interim or n_interim < 2
    """
    if n_interim < 2:
        raise ArgumentError(f"n_interim must be at least 2 (got {n_interim})")
    if n_final < n_interim:
        raise ArgumentError(f"n_final ({n_final}) cannot be smaller than n_interim ({n_interim})")
    return (n_final / n_interim) * np.asarray(sigma_interim, dtype=float)


@dataclass(frozen=True)
class CovBlocks:
    """Covariance blocks of the stacked normalized contrasts n_m^{-1/2} Z(t_m).

    ``cross[(m, k)]`` holds the block for analyses m < k (0-based). ``n`` holds
    subjects for full-data blocks and event counts for the approximation.
    """

    sigma: tuple[np.ndarray, ...]
    n: tuple[int, ...]
    method: CovarianceMethod
    cross: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def analyses(self) -> int:
        return len(self.sigma)

    def block(self, m: int, k: int) -> np.ndarray:
        if m == k:
            return self.sigma[m]
        if m < k:
            return self.cross[(m, k)]
        return self.cross[(k, m)].T

    def stacked(self) -> np.ndarray:
        return np.block([[self.block(m, k) for k in range(self.analyses)] for m in range(self.analyses)])


def linearized_blocks(influences: Sequence[InfluenceSet]) -> CovBlocks:
    """Full-data covariance blocks from influence vectors at every analysis."""
    if not influences:
        raise ArgumentError("At least one analysis is required")
    cross = {
        (m, k): cross_cov(influences[m], influences[k])
        for m in range(len(influences))
        for k in range(m + 1, len(influences))
    }
    return CovBlocks(
        sigma=tuple(sigma_hat(influence) for influence in influences),
        n=tuple(influence.n for influence in influences),
        method=CovarianceMethod.LINEARIZATION,
        cross=cross,
    )


def approximate_blocks(interim: InfluenceSet, events_per_analysis: Sequence[int]) -> CovBlocks:
    """Covariance blocks for M analyses built from the first analysis only.

    Information grows with events, so later analyses reuse the interim sigma
    (the working final covariance renormalized per event) and cross blocks
    sqrt(d_m / d_k) * sigma, where d_m is the event count at analysis m.

    Args:
        interim: Influence vectors at the first analysis
        events_per_analysis: Observed or planned events at every analysis

    Raises:
        ArgumentError: If the event counts decrease
        InsufficientDataError: If the first analysis has fewer than 2 events
    """
    events = tuple(int(count) for count in events_per_analysis)
    if not events:
        raise ArgumentError("At least one analysis is required")
    if events[0] < 2:
        raise InsufficientDataError(f"The interim analysis needs at least 2 events (got {events[0]})")
    if any(later < earlier for earlier, later in zip(events, events[1:], strict=False)):
        raise ArgumentError(f"events_per_analysis must be non-decreasing (got {events})")

    sigma_first = sigma_hat(interim)
    sigma = tuple(approx_final_cov(sigma_first, events[0], count) * (events[0] / count) for count in events)
    cross = {
        (m, k): np.sqrt(events[m] / events[k]) * sigma_first
        for m in range(len(events))
        for k in range(m + 1, len(events))
    }
    return CovBlocks(sigma=sigma, n=events, method=CovarianceMethod.APPROXIMATION, cross=cross)


def _resample_indices(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, n, size=n)


def _bootstrap_replicate(
    records: Sequence[PatientRecord],
    cutoffs: Sequence[float],
    design: SmartDesign,
    kind: StatisticKind,
    seed: np.random.SeedSequence,
) -> tuple[np.ndarray | None, int]:
    """One bootstrap draw of the stacked normalized contrasts; redraws resamples without events."""
    rng = np.random.default_rng(seed)
    degenerate = 0
    for _ in range(MAX_REDRAWS):
        indices = _resample_indices(rng, len(records))
        resample = [records[i] for i in indices]
        parts = []
        for cutoff in cutoffs:
            try:
                view = snapshot(resample, cutoff)
            except EmptySnapshotError:
                break
            if view.events == 0:
                break
            parts.append(contrast_vector(view, design, kind) / np.sqrt(view.n))
        else:
            return np.concatenate(parts), degenerate
        degenerate += 1
    return None, degenerate


def bootstrap_blocks(
    records: Sequence[PatientRecord],
    cutoffs: Sequence[float],
    design: SmartDesign,
    kind: StatisticKind | str = StatisticKind.LR,
    b: int | None = None,
    seed: int | None = None,
    n_jobs: int | None = None,
) -> CovBlocks:
    """Bootstrap covariance of the stacked normalized contrasts at the given cutoffs.

    Args:
        records: Cohort to resample (subjects with their enrollment times)
        cutoffs: Increasing calendar cutoffs of the analyses
        design: Randomization structure
        kind: Statistic family
        b: Number of replicates (defaults to Config.BOOTSTRAP_REPS)
        seed: Root seed; each replicate gets its own spawned stream
        n_jobs: joblib worker count (defaults to Config.N_JOBS)

    Returns:
        CovBlocks tagged as bootstrap

    Raises:
        ArgumentError: If b < 2 or cutoffs are not increasing
        InfeasibleError: If more than half of all resamples were degenerate
    """
    kind = StatisticKind.parse(kind)
    b = Config.BOOTSTRAP_REPS if b is None else b
    if b < 2:
        raise ArgumentError(f"Bootstrap needs at least 2 replicates (got {b})")
    if any(later <= earlier for earlier, later in zip(cutoffs, cutoffs[1:], strict=False)):
        raise ArgumentError(f"cutoffs must be strictly increasing (got {tuple(cutoffs)})")
    seed = Config.DEFAULT_SEED if seed is None else seed
    n_jobs = Config.N_JOBS if n_jobs is None else n_jobs
    records = list(records)

    children = np.random.SeedSequence(seed).spawn(b)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_bootstrap_replicate)(records, cutoffs, design, kind, child) for child in children
    )

    degenerate = sum(count for _, count in results)
    attempts = b + degenerate
    if degenerate > 0.5 * attempts or any(vector is None for vector, _ in results):
        raise InfeasibleError(f"{degenerate} of {attempts} bootstrap resamples had no events")
    if degenerate:
        logger.warning("Redrew %d degenerate bootstrap resamples (%d replicates)", degenerate, b)

    stacked = np.vstack([vector for vector, _ in results])
    covariance = np.atleast_2d(np.cov(stacked, rowvar=False, ddof=1))
    p = stacked.shape[1] // len(cutoffs)

    def part(m: int, k: int) -> np.ndarray:
        return covariance[m * p : (m + 1) * p, k * p : (k + 1) * p]

    counts = tuple(snapshot(records, cutoff).n for cutoff in cutoffs)
    logger.info("Bootstrap covariance from %d replicates at %d analyses", b, len(cutoffs))
    return CovBlocks(
        sigma=tuple(part(m, m) for m in range(len(cutoffs))),
        n=counts,
        method=CovarianceMethod.BOOTSTRAP,
        cross={(m, k): part(m, k) for m in range(len(cutoffs)) for k in range(m + 1, len(cutoffs))},
    )


def bootstrap_cov(
    snapshot_interim: AnalysisSnapshot,
    snapshot_final: AnalysisSnapshot,
    design: SmartDesign,
    kind: StatisticKind | str = StatisticKind.LR,
    b: int | None = None,
    seed: int | None = None,
    n_jobs: int | None = None,
) -> CovBlocks:
    """Bootstrap covariance blocks for an interim/final pair of snapshots of one cohort."""
    if snapshot_interim.cutoff >= snapshot_final.cutoff:
        raise ArgumentError(
            f"Interim cutoff {snapshot_interim.cutoff} must precede final cutoff {snapshot_final.cutoff}"
        )
    return bootstrap_blocks(
        snapshot_final.records,
        (snapshot_interim.cutoff, snapshot_final.cutoff),
        design,
        kind,
        b=b,
        seed=seed,
        n_jobs=n_jobs,
    )

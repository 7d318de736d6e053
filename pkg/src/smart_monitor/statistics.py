"""Weighted counting processes, weighted log-rank and Tsiatis-Davidian contrasts, and the Wald form."""

from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np
from scipy import stats

from .config import Config
from .errors import ArgumentError
from .trial import AnalysisSnapshot, CohortArrays, SmartDesign
from .weights import WeightMatrices, weight_matrices

logger = Config.get_logger(__name__)

# Any positive weighted risk set holds at least one subject with weight >= 1
_ZERO_RISK = 0.5


class StatisticKind(Enum):
    """Test-statistic families."""

    LR = "LR"
    TD = "TD"

    @classmethod
    def parse(cls, value: "str | StatisticKind") -> "StatisticKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError as e:
            raise ArgumentError(f"Unknown statistic {value!r}; expected lr or td") from e


@dataclass(frozen=True)
class WeightedProcesses:
    """Weighted event and at-risk processes of one regime at the distinct event times.

    Attributes:
        dtr: Regime label
        event_times: Sorted distinct observed event times
        nbar_increments: Weighted event increments dN̄(s)
        ybar: Weighted at-risk values Ȳ(s), at-risk meaning u >= s
        dn: Pooled raw event counts dN(s)
        y: Pooled raw at-risk counts Y(s)
    """

    dtr: str
    event_times: np.ndarray
    nbar_increments: np.ndarray
    ybar: np.ndarray
    dn: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class CohortProcesses:
    """Processes of every regime at once, columns in catalog order."""

    labels: tuple[str, ...]
    times: np.ndarray
    dnbar: np.ndarray
    ybar: np.ndarray
    dn: np.ndarray
    y: np.ndarray
    weights: WeightMatrices
    cohort: CohortArrays

    @property
    def event_index(self) -> np.ndarray:
        """Row of ``times`` at which each subject's follow-up ends."""
        return np.searchsorted(self.times, self.cohort.u, side="left")

    def weights_at_exit(self) -> np.ndarray:
        """(n, D) weights evaluated at each subject's own u."""
        jumped = (self.cohort.t1 <= self.cohort.u)[:, None]
        return np.where(jumped, self.weights.after, self.weights.before)


def _suffix_sums(values: np.ndarray) -> np.ndarray:
    """Row k holds the sum of rows k.. of values; an extra zero row is appended."""
    suffix = np.cumsum(values[::-1], axis=0)[::-1]
    return np.vstack([suffix, np.zeros((1,) + values.shape[1:])])


def prefix_sums(values: np.ndarray) -> np.ndarray:
    """Row k holds the sum of rows ..k-1 of values."""
    return np.vstack([np.zeros((1,) + values.shape[1:]), np.cumsum(values, axis=0)])


def _weighted_at_risk(
    times: np.ndarray, u: np.ndarray, t1: np.ndarray, before: np.ndarray, after: np.ndarray
) -> np.ndarray:
    """Σ_i I(u_i >= s) W_i(s) at each s in times, for every column of the weight matrices."""
    order_u = np.argsort(u, kind="stable")
    order_t1 = np.argsort(t1, kind="stable")
    at_risk_start = np.searchsorted(u[order_u], times, side="left")
    jumped_by = np.searchsorted(t1[order_t1], times, side="right")

    jump = after - before
    ybar = (
        _suffix_sums(before[order_u])[at_risk_start]
        + prefix_sums(jump[order_t1])[jumped_by]
        - prefix_sums(jump[order_u])[at_risk_start]
    )
    ybar[ybar < _ZERO_RISK] = 0.0
    return ybar


def cohort_processes(snapshot: AnalysisSnapshot, design: SmartDesign) -> CohortProcesses:
    """Build the weighted processes of every embedded regime for a snapshot."""
    cohort = snapshot.arrays
    weights = weight_matrices(cohort, design)
    events = cohort.delta == 1
    times = np.unique(cohort.u[events])

    event_index = np.searchsorted(times, cohort.u[events], side="left")
    dn = np.bincount(event_index, minlength=len(times)).astype(float)
    y = (cohort.n - np.searchsorted(np.sort(cohort.u), times, side="left")).astype(float)

    ybar = _weighted_at_risk(times, cohort.u, cohort.t1, weights.before, weights.after)
    jumped = (cohort.t1 <= cohort.u)[:, None]
    exit_weights = np.where(jumped, weights.after, weights.before)
    dnbar = np.zeros((len(times), len(design.dtrs)))
    np.add.at(dnbar, event_index, exit_weights[events])

    return CohortProcesses(
        labels=design.labels,
        times=times,
        dnbar=dnbar,
        ybar=ybar,
        dn=dn,
        y=y,
        weights=weights,
        cohort=cohort,
    )


def weighted_processes(snapshot: AnalysisSnapshot, design: SmartDesign, dtr: str) -> WeightedProcesses:
    """Weighted event and at-risk processes of one embedded regime.

    Args:
        snapshot: Data visible at the analysis
        design: Randomization structure
        dtr: Regime label, e.g. "A1B2C1"

    Returns:
        Step-function values at the distinct event times
    """
    processes = cohort_processes(snapshot, design)
    try:
        column = processes.labels.index(dtr.upper())
    except ValueError as e:
        raise ArgumentError(f"{dtr} is not an embedded DTR of {design.kind.value}") from e
    return WeightedProcesses(
        dtr=processes.labels[column],
        event_times=processes.times,
        nbar_increments=processes.dnbar[:, column].copy(),
        ybar=processes.ybar[:, column].copy(),
        dn=processes.dn,
        y=processes.y,
    )


def safe_ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    """Elementwise ratio with 0 wherever the denominator is 0."""
    shape = np.broadcast_shapes(np.shape(numerator), np.shape(denominator))
    return np.divide(numerator, denominator, out=np.zeros(shape), where=denominator > 0)


def lr_terms(processes: CohortProcesses, reference: int) -> np.ndarray:
    """Per-event-time weighted log-rank increments, reference column removed."""
    y_ref = processes.ybar[:, [reference]]
    n_ref = processes.dnbar[:, [reference]]
    terms = safe_ratio(y_ref * processes.dnbar - processes.ybar * n_ref, processes.ybar + y_ref)
    return np.delete(terms, reference, axis=1)


def lr_from_processes(processes: CohortProcesses, reference: int) -> np.ndarray:
    return lr_terms(processes, reference).sum(axis=0)


def td_hazard(processes: CohortProcesses) -> np.ndarray:
    """Pooled null hazard increments Σ dN̄ / Σ Ȳ across all regimes."""
    return safe_ratio(processes.dnbar.sum(axis=1), processes.ybar.sum(axis=1))


def td_from_processes(processes: CohortProcesses) -> np.ndarray:
    d_lambda = td_hazard(processes)
    return (processes.dnbar - processes.ybar * d_lambda[:, None]).sum(axis=0)


def lr_vector(snapshot: AnalysisSnapshot, design: SmartDesign) -> np.ndarray:
    """Weighted log-rank contrasts of each non-reference regime against the reference.

    Args:
        snapshot: Data visible at the analysis
        design: Randomization structure and reference regime

    Returns:
        Vector ordered as ``design.contrast_labels``
    """
    processes = cohort_processes(snapshot, design)
    z = lr_from_processes(processes, design.reference_index)
    logger.debug("LR contrasts: %s", dict(zip(design.contrast_labels, np.round(z, 4), strict=True)))
    return z


def lr_vector_score_form(snapshot: AnalysisSnapshot, design: SmartDesign) -> np.ndarray:
    """Weighted log-rank contrasts written as weighted observed-minus-expected sums.

    Each component is Σ_s [dN̄_d(s) - Ȳ_d(s) dΛ(s)] with the pairwise pooled
    hazard dΛ = (dN̄_ref + dN̄_d) / (Ȳ_ref + Ȳ_d).
    """
    processes = cohort_processes(snapshot, design)
    ref = design.reference_index
    pooled_events = processes.dnbar + processes.dnbar[:, [ref]]
    pooled_risk = processes.ybar + processes.ybar[:, [ref]]
    d_lambda = safe_ratio(pooled_events, pooled_risk)
    z = (processes.dnbar - processes.ybar * d_lambda).sum(axis=0)
    return np.delete(z, ref)


def td_vector(snapshot: AnalysisSnapshot, design: SmartDesign) -> np.ndarray:
    """Tsiatis-Davidian score contrasts for every embedded regime, in catalog order."""
    processes = cohort_processes(snapshot, design)
    z = td_from_processes(processes)
    logger.debug("TD contrasts: %s", dict(zip(design.labels, np.round(z, 4), strict=True)))
    return z


def contrast_vector(snapshot: AnalysisSnapshot, design: SmartDesign, kind: StatisticKind | str) -> np.ndarray:
    if StatisticKind.parse(kind) is StatisticKind.LR:
        return lr_vector(snapshot, design)
    return td_vector(snapshot, design)


def contrast_labels(design: SmartDesign, kind: StatisticKind | str) -> tuple[str, ...]:
    if StatisticKind.parse(kind) is StatisticKind.LR:
        return design.contrast_labels
    return design.labels


def _check_symmetric(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ArgumentError(f"{name} must be a square matrix (got shape {m.shape})")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-10 * scale):
        raise ArgumentError(f"{name} is not symmetric")
    return (m + m.T) / 2


def retained_spectrum(m: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvectors and eigenvalues above tol * largest eigenvalue, largest first."""
    values, vectors = np.linalg.eigh(m)
    values, vectors = values[::-1], vectors[:, ::-1]
    top = max(float(values[0]) if len(values) else 0.0, 0.0)
    if top <= 0:
        return vectors[:, :0], values[:0]
    keep = values > tol * top
    return vectors[:, keep], values[keep]


def generalized_inverse(m: np.ndarray, tol: float | None = None) -> tuple[np.ndarray, int]:
    """Spectral generalized inverse of a symmetric matrix.

    Args:
        m: Symmetric matrix
        tol: Relative eigenvalue cutoff; defaults to Config.GINV_TOL

    Returns:
        Tuple of (generalized inverse, retained rank)

    Raises:
        ArgumentError: If tol <= 0 or m is not symmetric
    """
    tol = Config.GINV_TOL if tol is None else tol
    if tol <= 0:
        raise ArgumentError(f"tol must be positive (got {tol})")
    m = _check_symmetric(m, "matrix")
    vectors, values = retained_spectrum(m, tol)
    return (vectors / values) @ vectors.T, len(values)


@dataclass(frozen=True)
class TestSummary:
    """Result of one Wald test.

    Attributes:
        kind: Statistic family
        z: Contrast vector Z(t)
        sigma_hat: Covariance estimate of n^{-1/2} Z(t)
        t_value: Wald statistic T(t)
        df: Rank of sigma_hat
        n: Sample size the statistic is normalized by
        p_value: Upper chi-square tail probability of t_value on df degrees of freedom
        labels: Regime labels of the components of z
    """

    __test__ = False

    kind: StatisticKind
    z: np.ndarray
    sigma_hat: np.ndarray
    t_value: float
    df: int
    n: int
    p_value: float
    labels: tuple[str, ...] = ()
    cutoff: float | None = None
    events: int | None = None
    info_fraction: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "labels": list(self.labels),
            "z": self.z.tolist(),
            "sigma_hat": self.sigma_hat.tolist(),
            "t_value": self.t_value,
            "df": self.df,
            "n": self.n,
            "p_value": self.p_value,
            "cutoff": self.cutoff,
            "events": self.events,
            "info_fraction": self.info_fraction,
        }


def wald_statistic(
    z: np.ndarray,
    sigma_hat: np.ndarray,
    n: int,
    tol: float | None = None,
    kind: StatisticKind | str = StatisticKind.LR,
    labels: tuple[str, ...] = (),
    nominal_df: int | None = None,
) -> TestSummary:
    """Quadratic-form test T = n^{-1} z' (sigma_hat)^g z.

    Args:
        z: Contrast vector
        sigma_hat: Symmetric covariance estimate of n^{-1/2} z
        n: Sample size
        tol: Relative eigenvalue cutoff for the generalized inverse
        kind: Statistic family, recorded in the summary
        labels: Component labels, recorded in the summary
        nominal_df: Expected rank; a warning is logged if the estimate differs

    Returns:
        TestSummary with T, its rank-based df and chi-square p-value

    Raises:
        ArgumentError: If n < 1, shapes disagree, or sigma_hat is not symmetric
    """
    if n < 1:
        raise ArgumentError(f"n must be at least 1 (got {n})")
    z = np.asarray(z, dtype=float)
    sigma = _check_symmetric(sigma_hat, "sigma_hat")
    if sigma.shape[0] != z.shape[0]:
        raise ArgumentError(f"sigma_hat is {sigma.shape} but z has length {z.shape[0]}")

    ginv, rank = generalized_inverse(sigma, tol)
    t_value = max(float(z @ ginv @ z) / n, 0.0)
    p_value = float(stats.chi2.sf(t_value, rank)) if rank > 0 else 1.0

    if nominal_df is not None and rank != nominal_df:
        logger.warning("Covariance rank %d differs from nominal df %d", rank, nominal_df)

    return TestSummary(
        kind=StatisticKind.parse(kind),
        z=z,
        sigma_hat=sigma,
        t_value=t_value,
        df=rank,
        n=int(n),
        p_value=p_value,
        labels=tuple(labels),
    )

"""Joint null distribution of the interim statistics and efficacy-boundary solvers."""

import hashlib
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from .config import Config
from .covariance import CovarianceMethod, CovBlocks
from .errors import ArgumentError, InfeasibleError, InsufficientDataError, NumericalConsistencyError
from .statistics import retained_spectrum

logger = Config.get_logger(__name__)

DIAGONAL_WARN_TOL = 1e-6
DIAGONAL_ERROR_TOL = 1e-3
MIN_STABLE_DRAWS = 1000


class BoundaryMethod(Enum):
    POCOCK = "pocock"
    OBF = "obf"
    LD_POCOCK = "ld-pocock"
    LD_OBF = "ld-obf"
    CUSTOM = "custom"

    @classmethod
    def parse(cls, value: "str | BoundaryMethod") -> "BoundaryMethod":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as e:
            raise ArgumentError(f"Unknown boundary method {value!r}") from e

    @property
    def spending(self) -> "SpendingKind | None":
        return {
            BoundaryMethod.LD_POCOCK: SpendingKind.POCOCK_LIKE,
            BoundaryMethod.LD_OBF: SpendingKind.OBF_LIKE,
        }.get(self)


class SpendingKind(Enum):
    POCOCK_LIKE = "pocock-like"  # alpha * log(1 + (e - 1) t)
    OBF_LIKE = "obf-like"  # 2 (1 - Phi(z_{alpha/2} / sqrt(t)))

    @classmethod
    def parse(cls, value: "str | SpendingKind") -> "SpendingKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as e:
            raise ArgumentError(f"Unknown spending function {value!r}; expected pocock-like or obf-like") from e


def _default_fractions(analyses: int) -> tuple[float, ...]:
    return tuple((m + 1) / analyses for m in range(analyses))


def _check_alpha(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise ArgumentError(f"alpha must lie in (0, 1) (got {alpha})")
    return float(alpha)


@dataclass(frozen=True)
class PsiMatrix:
    """Correlation matrix of the stacked standardized factors Q(t_1), ..., Q(t_M).

    Attributes:
        matrix: Full stacked matrix, blocks of size ranks[m]
        ranks: Degrees of freedom per analysis
        info_fractions: Information fractions of the analyses
        method: Covariance estimator the matrix was built from, if known
    """

    matrix: np.ndarray
    ranks: tuple[int, ...]
    info_fractions: tuple[float, ...] = ()
    method: CovarianceMethod | None = None

    @property
    def analyses(self) -> int:
        return len(self.ranks)

    @property
    def full_data(self) -> bool:
        """Whether every analysis used its own full-data covariance."""
        return self.method in (CovarianceMethod.LINEARIZATION, CovarianceMethod.BOOTSTRAP)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.ranks)]))

    def block(self, m: int, k: int) -> np.ndarray:
        start_m, start_k = self.offsets[m], self.offsets[k]
        return self.matrix[start_m : start_m + self.ranks[m], start_k : start_k + self.ranks[k]]

    def digest(self) -> str:
        """SHA-256 of the matrix rounded to 12 decimals, stable across platforms."""
        rounded = np.round(self.matrix, 12) + 0.0
        payload = rounded.astype("<f8").tobytes() + np.asarray(self.ranks, dtype="<i8").tobytes()
        return hashlib.sha256(payload).hexdigest()


def _standardizer(sigma: np.ndarray, n: int, tol: float) -> np.ndarray:
    """L(t) = U Q^{1/2} for G(t) = n^{-1} sigma^g = U Q U', restricted to the retained rank."""
    vectors, values = retained_spectrum((sigma + sigma.T) / 2, tol)
    return vectors / np.sqrt(n * values)


def psi_matrix(
    cov: CovBlocks,
    n_per_analysis: Sequence[int] | None = None,
    tol: float | None = None,
    info_fractions: Sequence[float] | None = None,
) -> PsiMatrix:
    """Build Ψ from covariance blocks.

    Ψ_{m,k} = L(t_m)' cov(Z(t_m), Z(t_k)) L(t_k), where cov(Z(t_m), Z(t_k))
    is sqrt(n_m n_k) times the normalized block.

    Args:
        cov: Covariance blocks of the normalized contrasts
        n_per_analysis: Sample sizes; defaults to ``cov.n``
        tol: Relative eigenvalue cutoff; defaults to Config.GINV_TOL
        info_fractions: Information fractions to carry along

    Returns:
        PsiMatrix with identity diagonal blocks

    Raises:
        ArgumentError: If tol <= 0 or counts do not match the blocks
        InsufficientDataError: If an analysis has a zero covariance
        NumericalConsistencyError: If a diagonal block is far from identity
    """
    tol = Config.GINV_TOL if tol is None else tol
    if tol <= 0:
        raise ArgumentError(f"tol must be positive (got {tol})")
    counts = tuple(int(x) for x in (n_per_analysis if n_per_analysis is not None else cov.n))
    if len(counts) != cov.analyses:
        raise ArgumentError(f"Got {len(counts)} sample sizes for {cov.analyses} analyses")

    factors = [_standardizer(cov.sigma[m], counts[m], tol) for m in range(cov.analyses)]
    ranks = tuple(factor.shape[1] for factor in factors)
    if min(ranks) == 0:
        raise InsufficientDataError(f"An analysis has no estimable contrast information (ranks {ranks})")

    rows = []
    for m in range(cov.analyses):
        row = []
        for k in range(cov.analyses):
            scale = math.sqrt(counts[m] * counts[k])
            row.append(factors[m].T @ (scale * cov.block(m, k)) @ factors[k])
        rows.append(row)
    matrix = np.block(rows)
    matrix = (matrix + matrix.T) / 2

    fractions = tuple(info_fractions) if info_fractions is not None else _default_fractions(cov.analyses)
    psi = PsiMatrix(matrix=matrix, ranks=ranks, info_fractions=fractions, method=cov.method)
    for m in range(cov.analyses):
        drift = float(np.abs(psi.block(m, m) - np.eye(ranks[m])).max())
        if drift > DIAGONAL_ERROR_TOL:
            raise NumericalConsistencyError(f"Psi diagonal block {m + 1} deviates from identity by {drift:.2e}")
        if drift > DIAGONAL_WARN_TOL:
            logger.warning("Psi diagonal block %d deviates from identity by %.2e", m + 1, drift)

    logger.info("Built Psi for %d analyses with ranks %s (%s)", cov.analyses, ranks, cov.method.value)
    return psi


@dataclass(frozen=True)
class JointSample:
    """Monte Carlo draws of (T(t_1), ..., T(t_M)) under the null.

    Attributes:
        t_values: (B, M) array of quadratic forms
        seed: Root seed of the draws
        psi: The Ψ the draws were made from
    """

    t_values: np.ndarray
    seed: int
    psi: PsiMatrix

    @property
    def draws(self) -> int:
        return self.t_values.shape[0]

    @property
    def analyses(self) -> int:
        return self.t_values.shape[1]


def _factor_psi(psi: PsiMatrix) -> np.ndarray:
    values, vectors = np.linalg.eigh(psi.matrix)
    floor = Config.PSD_TOL * max(1.0, float(values.max(initial=0.0)))
    if values.min(initial=0.0) < -floor:
        raise NumericalConsistencyError(f"Psi has a negative eigenvalue {values.min():.3e} beyond tolerance")
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def _draw_chunk(factor: np.ndarray, offsets: tuple[int, ...], size: int, seed: np.random.SeedSequence) -> np.ndarray:
    rng = np.random.default_rng(seed)
    normals = rng.standard_normal((size, factor.shape[1])) @ factor.T
    squares = normals**2
    blocks = zip(offsets, offsets[1:], strict=False)
    return np.column_stack([squares[:, start:stop].sum(axis=1) for start, stop in blocks])


def sample_joint_T(  # noqa: N802
    psi: PsiMatrix,
    b: int | None = None,
    seed: int | None = None,
    n_jobs: int | None = None,
) -> JointSample:
    """Draw the joint null distribution of the per-analysis Wald statistics.

    Stacked normal vectors with covariance Ψ are drawn in fixed-size chunks,
    each from its own spawned stream, and reduced to per-analysis sums of squares.

    Args:
        psi: Correlation structure
        b: Number of draws (defaults to Config.BOUNDARY_DRAWS)
        seed: Root seed (defaults to Config.DEFAULT_SEED)
        n_jobs: Thread count for chunk generation (defaults to Config.N_JOBS)

    Returns:
        JointSample of shape (b, M)
    """
    b = Config.BOUNDARY_DRAWS if b is None else int(b)
    if b < 1:
        raise ArgumentError(f"b must be positive (got {b})")
    if b < MIN_STABLE_DRAWS:
        logger.warning("Only %d draws requested; boundary quantiles will be unstable", b)
    seed = Config.DEFAULT_SEED if seed is None else int(seed)
    n_jobs = Config.N_JOBS if n_jobs is None else n_jobs

    factor = _factor_psi(psi)
    chunk = Config.DRAW_CHUNK_SIZE
    sizes = [min(chunk, b - start) for start in range(0, b, chunk)]
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    chunks = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_draw_chunk)(factor, psi.offsets, size, child) for size, child in zip(sizes, children, strict=True)
    )
    t_values = np.vstack(chunks)
    logger.debug("Drew %d joint statistics across %d chunks", b, len(sizes))
    return JointSample(t_values=t_values, seed=seed, psi=psi)


@dataclass(frozen=True)
class BoundarySet:
    """Efficacy thresholds on the chi-square scale, one per analysis.

    Attributes:
        method: How the thresholds were obtained
        thresholds: b_1, ..., b_M; +inf means the analysis can never reject
        alpha: Overall level
        spent: Cumulative alpha spent by each analysis
        info_fractions: Information fractions of the analyses
        oracle: Whether full-data covariance was used for every analysis
        draws: Monte Carlo draws behind the solution (0 when not sampled)
        seed: Root seed of the draws
        psi_digest: SHA-256 of the Ψ the thresholds were solved on
        ranks: Degrees of freedom per analysis
    """

    method: BoundaryMethod
    thresholds: tuple[float, ...]
    alpha: float
    spent: tuple[float, ...] = ()
    info_fractions: tuple[float, ...] = ()
    oracle: bool = False
    draws: int = 0
    seed: int | None = None
    psi_digest: str | None = None
    ranks: tuple[int, ...] = field(default_factory=tuple)

    @property
    def analyses(self) -> int:
        return len(self.thresholds)

    @property
    def label(self) -> str:
        return ("oracle-" if self.oracle else "") + self.method.value

    @classmethod
    def fixed(
        cls, thresholds: Sequence[float], alpha: float | None = None, info_fractions: Sequence[float] = ()
    ) -> "BoundarySet":
        """Caller-supplied thresholds, e.g. read from a protocol."""
        if not thresholds:
            raise ArgumentError("At least one threshold is required")
        if any(not value >= 0 for value in thresholds):
            raise ArgumentError(f"Thresholds must be non-negative (got {tuple(thresholds)})")
        fractions = tuple(info_fractions) or _default_fractions(len(thresholds))
        return cls(
            method=BoundaryMethod.CUSTOM,
            thresholds=tuple(float(x) for x in thresholds),
            alpha=Config.ALPHA if alpha is None else alpha,
            info_fractions=fractions,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method.value,
            "label": self.label,
            "thresholds": [_encode_float(x) for x in self.thresholds],
            "alpha": self.alpha,
            "spent": list(self.spent),
            "info_fractions": list(self.info_fractions),
            "oracle": self.oracle,
            "draws": self.draws,
            "seed": self.seed,
            "psi_digest": self.psi_digest,
            "ranks": list(self.ranks),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BoundarySet":
        try:
            return cls(
                method=BoundaryMethod.parse(data["method"]),
                thresholds=tuple(float(x) for x in data["thresholds"]),
                alpha=float(data["alpha"]),
                spent=tuple(float(x) for x in data.get("spent", ())),
                info_fractions=tuple(float(x) for x in data.get("info_fractions", ())),
                oracle=bool(data.get("oracle", False)),
                draws=int(data.get("draws", 0)),
                seed=data.get("seed"),
                psi_digest=data.get("psi_digest"),
                ranks=tuple(int(x) for x in data.get("ranks", ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ArgumentError(f"Invalid boundary definition: {e}") from e


def _encode_float(value: float) -> float | str:
    return "inf" if math.isinf(value) else value


def _smallest_threshold(values: np.ndarray, allowed: int) -> float:
    """Smallest b with at most ``allowed`` entries of values strictly above b."""
    if len(values) == 0 or allowed >= len(values):
        return 0.0
    if allowed < 0:
        allowed = 0
    ordered = np.sort(values)
    return float(ordered[len(values) - allowed - 1])


def _allowed(fraction: float, draws: int) -> int:
    return math.floor(fraction * draws + 1e-9)


def crossing_rates(sample: JointSample, thresholds: Sequence[float]) -> tuple[float, ...]:
    """Cumulative probability of having crossed by each analysis, estimated on the sample."""
    crossed = sample.t_values > np.asarray(thresholds, dtype=float)[None, :]
    return tuple(float(x) for x in np.logical_or.accumulate(crossed, axis=1).mean(axis=0))


def _fractions_of(sample: JointSample) -> tuple[float, ...]:
    return sample.psi.info_fractions or _default_fractions(sample.analyses)


def _boundary(
    sample: JointSample,
    method: BoundaryMethod,
    thresholds: tuple[float, ...],
    alpha: float,
    oracle: bool | None,
    spent: tuple[float, ...] | None = None,
) -> BoundarySet:
    if oracle is None:
        oracle = sample.psi.full_data
    return BoundarySet(
        method=method,
        thresholds=thresholds,
        alpha=alpha,
        spent=spent if spent is not None else crossing_rates(sample, thresholds),
        info_fractions=_fractions_of(sample),
        oracle=oracle,
        draws=sample.draws,
        seed=sample.seed,
        psi_digest=sample.psi.digest(),
        ranks=sample.psi.ranks,
    )


def pocock_boundary(sample: JointSample, alpha: float | None = None, oracle: bool | None = None) -> BoundarySet:
    """Constant threshold b with estimated P(any T(t_m) > b) <= alpha.

    Args:
        sample: Joint null draws
        alpha: Overall level (defaults to Config.ALPHA)
        oracle: Tag the result as solved on full-data Ψ; defaults to how Ψ was built

    Returns:
        BoundarySet with b_1 = ... = b_M
    """
    alpha = _check_alpha(Config.ALPHA if alpha is None else alpha)
    level = _smallest_threshold(sample.t_values.max(axis=1), _allowed(alpha, sample.draws))
    thresholds = (level,) * sample.analyses
    logger.info("Pocock boundary %.3f for %d analyses (alpha=%.3f)", level, sample.analyses, alpha)
    return _boundary(sample, BoundaryMethod.POCOCK, thresholds, alpha, oracle)


def obf_boundary(sample: JointSample, alpha: float | None = None, oracle: bool | None = None) -> BoundarySet:
    """Decreasing thresholds b_m = sqrt(M/m) * b_M at overall level alpha.

    Args:
        sample: Joint null draws
        alpha: Overall level (defaults to Config.ALPHA)
        oracle: Tag the result as solved on full-data Ψ; defaults to how Ψ was built

    Returns:
        BoundarySet whose ratios b_m / b_M are exactly sqrt(M/m)
    """
    alpha = _check_alpha(Config.ALPHA if alpha is None else alpha)
    analyses = sample.analyses
    ratios = np.sqrt(analyses / np.arange(1, analyses + 1))
    final = _smallest_threshold((sample.t_values / ratios).max(axis=1), _allowed(alpha, sample.draws))
    thresholds = tuple(float(ratio * final) for ratio in ratios)
    logger.info("OBF boundaries %s (alpha=%.3f)", tuple(round(x, 3) for x in thresholds), alpha)
    return _boundary(sample, BoundaryMethod.OBF, thresholds, alpha, oracle)


def error_spending(kind: SpendingKind | str, t_over_L: float, alpha: float) -> float:  # noqa: N803
    """Cumulative type I error spent at information fraction t/L.

    Args:
        kind: "pocock-like" (logarithmic) or "obf-like" (normal tail)
        t_over_L: Information fraction in (0, 1]
        alpha: Overall level

    Returns:
        Cumulative alpha, equal to alpha at t/L = 1
    """
    kind = SpendingKind.parse(kind)
    alpha = _check_alpha(alpha)
    if not 0 < t_over_L <= 1:
        raise ArgumentError(f"t_over_L must lie in (0, 1] (got {t_over_L})")
    if t_over_L == 1:
        return alpha

    if kind is SpendingKind.POCOCK_LIKE:
        return alpha * math.log(1 + (math.e - 1) * t_over_L)
    z = stats.norm.isf(alpha / 2)
    return float(2 * stats.norm.sf(z / math.sqrt(t_over_L)))


def _check_fractions(fractions: Sequence[float], analyses: int) -> tuple[float, ...]:
    fractions = tuple(float(x) for x in fractions)
    if len(fractions) != analyses:
        raise ArgumentError(f"Got {len(fractions)} information fractions for {analyses} analyses")
    if any(not 0 < x <= 1 for x in fractions) or any(b <= a for a, b in zip(fractions, fractions[1:], strict=False)):
        raise ArgumentError(f"Information fractions must be strictly increasing in (0, 1] (got {fractions})")
    if not math.isclose(fractions[-1], 1.0):
        raise ArgumentError(f"The last information fraction must be 1 (got {fractions[-1]})")
    return fractions


def ld_boundaries(
    psi: PsiMatrix,
    info_fractions: Sequence[float] | None = None,
    kind: SpendingKind | str = SpendingKind.POCOCK_LIKE,
    alpha: float | None = None,
    b: int | None = None,
    seed: int | None = None,
    sample: JointSample | None = None,
    spending: Sequence[float] | None = None,
    oracle: bool | None = None,
    n_jobs: int | None = None,
) -> BoundarySet:
    """Lan-DeMets error-spending boundaries solved sequentially.

    The first threshold is the chi-square quantile at the first cumulative
    spend; each later threshold is the smallest value keeping the empirical
    probability of crossing by that analysis within the cumulative spend.

    Args:
        psi: Correlation structure
        info_fractions: Information fractions (defaults to those of psi)
        kind: Spending function family
        alpha: Overall level (defaults to Config.ALPHA)
        b: Monte Carlo draws when no sample is supplied
        seed: Root seed when no sample is supplied
        sample: Pre-drawn joint sample from the same psi
        spending: Explicit cumulative spend per analysis, overriding kind
        oracle: Tag the result as solved on full-data Ψ; defaults to how Ψ was built
        n_jobs: Thread count for drawing

    Returns:
        BoundarySet whose ``spent`` is the nominal cumulative spend

    Raises:
        ArgumentError: If fractions are malformed
        InfeasibleError: If the spend is decreasing or exceeds alpha
    """
    alpha = _check_alpha(Config.ALPHA if alpha is None else alpha)
    fractions = _check_fractions(
        info_fractions if info_fractions is not None else psi.info_fractions or _default_fractions(psi.analyses),
        psi.analyses,
    )
    kind = SpendingKind.parse(kind)

    if spending is None:
        cumulative = tuple(error_spending(kind, t, alpha) for t in fractions)
    else:
        cumulative = tuple(float(x) for x in spending)
        if len(cumulative) != psi.analyses:
            raise ArgumentError(f"Got {len(cumulative)} spending values for {psi.analyses} analyses")
    if any(x < 0 for x in cumulative) or any(b2 < b1 for b1, b2 in zip(cumulative, cumulative[1:], strict=False)):
        raise InfeasibleError(f"Cumulative spending must be non-negative and non-decreasing (got {cumulative})")
    if cumulative[-1] > alpha + 1e-12:
        raise InfeasibleError(f"Spending {cumulative[-1]:.6f} exceeds alpha {alpha}")

    if sample is None:
        sample = sample_joint_T(psi, b=b, seed=seed, n_jobs=n_jobs)
    draws = sample.draws
    values = sample.t_values

    thresholds: list[float] = []
    alive = np.ones(draws, dtype=bool)
    for m in range(psi.analyses):
        increment = cumulative[m] - (cumulative[m - 1] if m else 0.0)
        if increment <= 0:
            threshold = math.inf
        elif m == 0:
            threshold = float(stats.chi2.isf(cumulative[0], psi.ranks[0]))
            empirical = _smallest_threshold(values[:, 0], _allowed(cumulative[0], draws))
            logger.info("First LD threshold %.3f (empirical check %.3f)", threshold, empirical)
        else:
            crossed = int((~alive).sum())
            allowed = _allowed(cumulative[m], draws) - crossed
            if allowed < 0:
                logger.warning("Earlier analyses already spent beyond the budget of analysis %d", m + 1)
            threshold = _smallest_threshold(values[alive, m], allowed)
        thresholds.append(threshold)
        alive &= values[:, m] <= threshold

    method = BoundaryMethod.LD_POCOCK if kind is SpendingKind.POCOCK_LIKE else BoundaryMethod.LD_OBF
    logger.info("%s boundaries %s", method.value, tuple(round(x, 3) for x in thresholds))
    return _boundary(sample, method, tuple(thresholds), alpha, oracle, spent=cumulative)


def solve_boundaries(
    sample: JointSample,
    method: BoundaryMethod | str,
    alpha: float | None = None,
    oracle: bool | None = None,
) -> BoundarySet:
    """Dispatch to the solver for ``method`` on an existing joint sample."""
    method = BoundaryMethod.parse(method)
    if method is BoundaryMethod.POCOCK:
        return pocock_boundary(sample, alpha, oracle=oracle)
    if method is BoundaryMethod.OBF:
        return obf_boundary(sample, alpha, oracle=oracle)
    if method.spending is not None:
        return ld_boundaries(sample.psi, kind=method.spending, alpha=alpha, sample=sample, oracle=oracle)
    raise ArgumentError(f"Boundaries of method {method.value!r} cannot be solved")

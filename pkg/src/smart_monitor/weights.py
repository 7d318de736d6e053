"""Time-dependent inverse-probability weights for embedded DTRs.

Each subject carries two weights per regime: ``w0`` applies while
``D_i(s) = eta_i * I(s >= t1_i)`` is 0, ``w1`` once it becomes 1. The
statistics layer only ever needs the pair and the jump time, so weights
are never tabulated on a grid.
"""

from dataclasses import dataclass

import numpy as np

from .config import Config
from .errors import ArgumentError, InternalContradictionError
from .trial import CohortArrays, DesignKind, PatientRecord, Regime, SmartDesign

logger = Config.get_logger(__name__)


@dataclass(frozen=True)
class WeightQuery:
    """A request for W_{dtr,i}(s)."""

    patient: PatientRecord
    dtr: str
    s: float


def weight(design: SmartDesign, query: WeightQuery) -> float:
    """Evaluate one subject's weight for one regime at study time s.

    Args:
        design: Randomization structure
        query: Subject, regime label, and evaluation time

    Returns:
        Non-negative weight; 0 when the subject's path is inconsistent with the regime

    Raises:
        ArgumentError: If s is negative or beyond the subject's follow-up
        InternalContradictionError: If stage-2 status is needed but missing
    """
    patient, s = query.patient, query.s
    if s < 0 or s > patient.u:
        raise ArgumentError(f"weight requested at s={s} outside [0, u={patient.u}] for {patient.id!r}")

    regime = Regime.parse(query.dtr)
    if regime not in design.dtrs:
        raise ArgumentError(f"{query.dtr} is not an embedded DTR of {design.kind.value}")
    if patient.a != regime.a:
        return 0.0

    first_stage = 1.0 / design.ell[regime.a - 1]
    if patient.eta != 1:
        return first_stage
    if patient.t1 is None or patient.r is None:
        raise InternalContradictionError(f"record {patient.id!r} has eta=1 without t1 and r")
    if s < patient.t1:
        return first_stage

    if patient.r == 1:
        return first_stage / design.p[regime.b - 1] if patient.b == regime.b else 0.0
    if design.kind is DesignKind.SMART2:
        return first_stage
    assert design.q is not None and regime.c is not None
    return first_stage / design.q[regime.c - 1] if patient.c == regime.c else 0.0


@dataclass(frozen=True)
class WeightMatrices:
    """Pre- and post-jump weights for every subject and every regime.

    Attributes:
        before: (n, D) weights for s < t1
        after: (n, D) weights for s >= t1 (equal to ``before`` when no jump is observed)
        labels: Regime labels in column order
    """

    before: np.ndarray
    after: np.ndarray
    labels: tuple[str, ...]


def weight_matrices(cohort: CohortArrays, design: SmartDesign) -> WeightMatrices:
    """Vectorized weights for a whole cohort."""
    regimes = design.dtrs
    n, d = cohort.n, len(regimes)
    before = np.zeros((n, d))
    after = np.zeros((n, d))

    ell = np.asarray(design.ell)
    p = np.asarray(design.p)
    stage_two = cohort.eta == 1
    responder = stage_two & (cohort.r == 1)
    non_responder = stage_two & (cohort.r == 0)

    for column, regime in enumerate(regimes):
        on_arm = cohort.a == regime.a
        first_stage = np.where(on_arm, 1.0 / ell[regime.a - 1], 0.0)

        if design.kind is DesignKind.SMART1:
            assert design.q is not None and regime.c is not None
            salvage = np.where(cohort.c == regime.c, 1.0 / design.q[regime.c - 1], 0.0)
        else:
            salvage = np.ones(n)
        maintenance = np.where(cohort.b == regime.b, 1.0 / p[regime.b - 1], 0.0)

        second_factor = np.where(responder, maintenance, np.where(non_responder, salvage, 1.0))
        before[:, column] = first_stage
        after[:, column] = first_stage * np.where(stage_two, second_factor, 1.0)

    return WeightMatrices(before=before, after=after, labels=design.labels)

"""Shared hand-built trials."""

import pytest

from src.smart_monitor.trial import DesignKind, PatientRecord, SmartDesign


def make_record(
    pid: str,
    enroll: float,
    a: int,
    u: float,
    delta: int,
    eta: int | None = None,
    t1: float | None = None,
    r: int | None = None,
    b: int | None = None,
    c: int | None = None,
) -> PatientRecord:
    return PatientRecord(id=pid, enroll_time=enroll, a=a, u=u, delta=delta, eta=eta, t1=t1, r=r, b=b, c=c)


@pytest.fixture
def smart2_design():
    return SmartDesign(kind=DesignKind.SMART2)


@pytest.fixture
def smart1_design():
    return SmartDesign(kind=DesignKind.SMART1, ell=(0.4, 0.6), p=(0.5, 0.5), q=(0.3, 0.7))


@pytest.fixture
def smart2_records():
    return [
        make_record("P1", 0.0, 1, 1.0, 1, eta=1, t1=0.3, r=1, b=1),
        make_record("P2", 0.1, 1, 0.8, 1, eta=1, t1=0.2, r=0),
        make_record("P3", 0.2, 2, 0.5, 1, eta=0),
        make_record("P4", 0.3, 2, 1.2, 0, eta=1, t1=0.4, r=1, b=2),
        make_record("P5", 0.4, 1, 0.8, 1, eta=1, t1=0.5, r=1, b=2),
        make_record("P6", 0.5, 2, 1.5, 1, eta=1, t1=0.1, r=0),
        make_record("P7", 0.6, 2, 0.9, 1, eta=1, t1=0.6, r=1, b=1),
        make_record("P8", 0.7, 1, 1.1, 0, eta=0),
    ]


@pytest.fixture
def smart1_records():
    return [
        make_record("Q01", 0.0, 1, 0.9, 1, eta=1, t1=0.2, r=1, b=1),
        make_record("Q02", 0.1, 1, 0.7, 1, eta=1, t1=0.3, r=0, c=2),
        make_record("Q03", 0.2, 2, 1.3, 1, eta=1, t1=0.1, r=0, c=1),
        make_record("Q04", 0.3, 2, 0.4, 1, eta=0),
        make_record("Q05", 0.4, 1, 1.0, 0, eta=1, t1=0.5, r=1, b=2),
        make_record("Q06", 0.5, 2, 0.7, 1, eta=1, t1=0.25, r=1, b=2),
        make_record("Q07", 0.6, 1, 0.6, 1, eta=1, t1=0.15, r=0, c=1),
        make_record("Q08", 0.7, 2, 1.1, 1, eta=1, t1=0.35, r=1, b=1),
        make_record("Q09", 0.8, 1, 0.3, 1, eta=0),
        make_record("Q10", 0.9, 2, 0.95, 0, eta=1, t1=0.45, r=0, c=2),
    ]


@pytest.fixture
def two_group_records():
    """Single-stage two-arm trial: nobody reaches stage 2."""
    rows = [
        (1, 0.5, 1),
        (1, 0.9, 0),
        (1, 1.2, 1),
        (1, 1.2, 1),
        (1, 2.0, 0),
        (2, 0.3, 1),
        (2, 0.9, 1),
        (2, 1.1, 0),
        (2, 1.5, 1),
        (2, 2.2, 1),
    ]
    return [make_record(f"G{i}", 0.0, a, u, delta, eta=0) for i, (a, u, delta) in enumerate(rows)]

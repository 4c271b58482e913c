"""
Survival data augmentation.

Right-censored, possibly left-truncated survival times are split over the
baseline cutpoints into Poisson pseudo-observations whose offsets carry the
exact exposure inside each interval. Random-walk structure matrices for the
baseline log-hazard live here as well.
"""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import sparse

from src.services.errors import LikelihoodDomainError, ModelSpecError
from src.services.likelihoods import Family, FamilyKind, loglik

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cutpoints:
    """Interval bounds 0 = c_0 < c_1 < ... < c_M"""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size < 2:
            raise ModelSpecError("Cutpoints need at least two values")
        if values[0] != 0.0:
            raise ModelSpecError(f"Cutpoints must start at 0, got {values[0]}")
        if np.any(np.diff(values) <= 0):
            raise ModelSpecError("Cutpoints must be strictly increasing")
        object.__setattr__(self, "values", values)

    @property
    def n_intervals(self) -> int:
        return self.values.size - 1

    @property
    def upper(self) -> float:
        return float(self.values[-1])

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.values[:-1] + self.values[1:])

    def covering(self, max_time: float) -> "Cutpoints":
        """Extend the last interval so that c_M >= max_time"""
        if max_time <= self.upper:
            return self
        values = self.values.copy()
        values[-1] = max_time
        return Cutpoints(values)

    @classmethod
    def from_explicit(cls, values, max_time: float) -> "Cutpoints":
        values = [float(v) for v in values]
        if values and values[0] > 0.0:
            values = [0.0] + values
        return cls(np.asarray(values)).covering(max_time)


@dataclass(frozen=True)
class PoissonPseudoRow:
    """One subject-interval exposure record"""
    subject: object
    outcome: str
    interval: int
    y: int
    offset: float
    exposure: float
    eval_time: float


@dataclass
class PseudoRowTable:
    """Column-wise pseudo rows of one survival outcome"""
    outcome: str
    subject: np.ndarray
    source_row: np.ndarray
    interval: np.ndarray
    y: np.ndarray
    start: np.ndarray
    stop: np.ndarray

    @property
    def exposure(self) -> np.ndarray:
        return self.stop - self.start

    @property
    def offset(self) -> np.ndarray:
        return np.log(self.exposure)

    @property
    def eval_time(self) -> np.ndarray:
        return 0.5 * (self.start + self.stop)

    def __len__(self) -> int:
        return self.y.size

    def to_rows(self) -> List[PoissonPseudoRow]:
        return [
            PoissonPseudoRow(
                subject=self.subject[i], outcome=self.outcome, interval=int(self.interval[i]), y=int(self.y[i]),
                offset=float(self.offset[i]), exposure=float(self.exposure[i]), eval_time=float(self.eval_time[i]),
            )
            for i in range(len(self))
        ]


def make_cutpoints(n_intervals: int, max_time: float) -> Cutpoints:
    """Equidistant cutpoints over [0, max_time]"""
    if n_intervals < 1:
        raise ModelSpecError(f"n_intervals must be >= 1, got {n_intervals}")
    if not max_time > 0:
        raise ModelSpecError(f"max_time must be positive, got {max_time}")
    return Cutpoints(np.linspace(0.0, float(max_time), int(n_intervals) + 1))


def decompose_table(subjects, entry, exit, event, cuts: Cutpoints, outcome: str = "S1") -> PseudoRowTable:
    """
    Split every (entry, exit] window over the cutpoint intervals.

    Rows follow subject order then interval order; the event indicator sits
    on the interval containing the exit time.
    """
    entry = np.asarray(entry, dtype=float)
    exit = np.asarray(exit, dtype=float)
    event = np.asarray(event, dtype=float)
    subjects = np.asarray(subjects)
    if np.any(exit <= entry):
        bad = int(np.flatnonzero(exit <= entry)[0])
        raise ModelSpecError(f"exit must exceed entry (row {bad}: entry={entry[bad]}, exit={exit[bad]})")
    if np.any(entry < 0):
        raise ModelSpecError("entry times must be non-negative")
    if np.any(exit > cuts.upper):
        raise ModelSpecError(f"exit time beyond the last cutpoint {cuts.upper}")
    c = cuts.values
    first = np.searchsorted(c, entry, side="right")
    last = np.searchsorted(c, exit, side="left")
    counts = last - first + 1
    source = np.repeat(np.arange(entry.size), counts)
    interval = first[source] + (np.arange(source.size) - np.repeat(np.cumsum(counts) - counts, counts))
    start = np.maximum(entry[source], c[interval - 1])
    stop = np.minimum(exit[source], c[interval])
    is_last = interval == last[source]
    y = np.where(is_last, event[source], 0.0)
    return PseudoRowTable(
        outcome=outcome, subject=subjects[source], source_row=source, interval=interval,
        y=y, start=start, stop=stop,
    )


def decompose(entry: float, exit: float, event: int, cuts: Cutpoints, subject=None, outcome: str = "S1") -> List[PoissonPseudoRow]:
    """Pseudo rows of a single survival record"""
    if exit <= entry:
        raise ModelSpecError(f"exit must exceed entry, got entry={entry}, exit={exit}")
    table = decompose_table([subject], [entry], [exit], [event], cuts, outcome)
    return table.to_rows()


def single_row_table(subjects, entry, exit, event, outcome: str) -> PseudoRowTable:
    """One row per subject for exact parametric likelihoods"""
    entry = np.asarray(entry, dtype=float)
    exit = np.asarray(exit, dtype=float)
    if np.any(exit <= entry):
        raise ModelSpecError("exit must exceed entry for every survival row")
    n = entry.size
    return PseudoRowTable(
        outcome=outcome, subject=np.asarray(subjects), source_row=np.arange(n), interval=np.zeros(n, dtype=int),
        y=np.asarray(event, dtype=float), start=entry, stop=exit,
    )


def rw_precision(order: int, m: int) -> sparse.csr_matrix:
    """Structure matrix D'D of order-th differences over m values"""
    if order not in (1, 2):
        raise ModelSpecError(f"Random-walk order must be 1 or 2, got {order}")
    if m < order + 1:
        raise ModelSpecError(f"Random walk of order {order} needs at least {order + 1} values, got {m}")
    diff = sparse.identity(m, format="csr")
    for k in range(order):
        size = m - k
        step = sparse.diags([-np.ones(size - 1), np.ones(size - 1)], [0, 1], shape=(size - 1, size), format="csr")
        diff = step @ diff
    return (diff.T @ diff).tocsr()


def parametric_baseline_loglik(kind: str, t, entry, event, eta, shape: float = 1.0, variant: int = 0) -> np.ndarray:
    """
    Exact survival log-likelihood under a parametric baseline.

    Returns event*log h(t) - [H(t) - H(entry)] per record.
    """
    if kind == "weibull":
        if not shape > 0:
            raise LikelihoodDomainError(f"Weibull shape must be positive, got {shape}")
        value, _, _ = loglik(
            Family(FamilyKind.WEIBULL_SURV), event, eta, float(np.log(shape)), entry=entry, exit=t, variant=variant
        )
        return value
    if kind == "exponential":
        value, _, _ = loglik(Family(FamilyKind.EXPONENTIAL_SURV), event, eta, entry=entry, exit=t)
        return value
    raise ModelSpecError(f"Unknown parametric baseline: {kind}")

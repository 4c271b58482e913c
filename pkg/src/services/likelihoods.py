"""
Observation likelihoods for the joint model.

Every family returns the log-likelihood per row together with its first and
second derivatives with respect to the linear predictor. Survival families
take the event indicator as response and read their exposure window from
the row extras.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, gammaln

from src.services.errors import LikelihoodDomainError, ModelSpecError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


class FamilyKind(str, Enum):
    """Supported observation families"""
    GAUSSIAN = "gaussian"
    LOGNORMAL = "lognormal"
    POISSON = "poisson"
    BINOMIAL = "binomial"
    POISSON_SURV = "poisson_surv"
    EXPONENTIAL_SURV = "exponential_surv"
    WEIBULL_SURV = "weibull_surv"


class LinkKind(str, Enum):
    """Link functions"""
    IDENTITY = "identity"
    LOG = "log"
    LOGIT = "logit"


DEFAULT_LINKS = {
    FamilyKind.GAUSSIAN: LinkKind.IDENTITY,
    FamilyKind.LOGNORMAL: LinkKind.IDENTITY,
    FamilyKind.POISSON: LinkKind.LOG,
    FamilyKind.BINOMIAL: LinkKind.LOGIT,
    FamilyKind.POISSON_SURV: LinkKind.LOG,
    FamilyKind.EXPONENTIAL_SURV: LinkKind.LOG,
    FamilyKind.WEIBULL_SURV: LinkKind.LOG,
}

SURVIVAL_FAMILIES = {FamilyKind.POISSON_SURV, FamilyKind.EXPONENTIAL_SURV, FamilyKind.WEIBULL_SURV}
LONGITUDINAL_FAMILIES = {FamilyKind.GAUSSIAN, FamilyKind.LOGNORMAL, FamilyKind.POISSON, FamilyKind.BINOMIAL}


@dataclass(frozen=True)
class Family:
    """Observation family with its link"""
    kind: FamilyKind
    link: Optional[LinkKind] = None

    def __post_init__(self):
        try:
            kind = FamilyKind(self.kind)
        except ValueError:
            raise ModelSpecError(f"Unknown family: {self.kind}")
        object.__setattr__(self, "kind", kind)
        link = DEFAULT_LINKS[kind] if self.link in (None, "default") else self.link
        try:
            link = LinkKind(link)
        except ValueError:
            raise ModelSpecError(f"Unknown link: {link}")
        if link != DEFAULT_LINKS[kind]:
            raise ModelSpecError(f"Link {link.value} is not available for family {kind.value}")
        object.__setattr__(self, "link", link)

    @property
    def has_precision(self) -> bool:
        """Whether the family carries a residual log-precision hyperparameter"""
        return self.kind in (FamilyKind.GAUSSIAN, FamilyKind.LOGNORMAL)

    @property
    def is_survival(self) -> bool:
        return self.kind in SURVIVAL_FAMILIES

    def inverse_link(self, eta: np.ndarray) -> np.ndarray:
        """Map linear-predictor values to the response scale"""
        eta = np.asarray(eta, dtype=float)
        if self.kind == FamilyKind.LOGNORMAL:
            return np.exp(eta)
        if self.link == LinkKind.LOG:
            return np.exp(eta)
        if self.link == LinkKind.LOGIT:
            return expit(eta)
        return eta


# ==================== Kernels ====================

def _check_eta(eta: np.ndarray) -> None:
    if not np.all(np.isfinite(eta)):
        raise LikelihoodDomainError("Non-finite linear predictor")


def weibull_increment(entry: np.ndarray, exit: np.ndarray, shape: float) -> np.ndarray:
    """t^α difference over (entry, exit]"""
    return np.power(exit, shape) - np.power(entry, shape)


def _survival_kernel(kind: FamilyKind, event, eta, entry, exit, log_shape, variant):
    if np.any(exit <= entry):
        raise LikelihoodDomainError("Survival rows need exit > entry")
    if kind == FamilyKind.EXPONENTIAL_SURV:
        cum = np.exp(eta) * (exit - entry)
        return event * eta - cum, event - cum, -cum
    if log_shape is None:
        raise LikelihoodDomainError("weibull_surv needs a log-shape hyperparameter")
    shape = float(np.exp(log_shape))
    increment = weibull_increment(entry, exit, shape)
    log_t = np.log(exit)
    if variant == 0:
        cum = np.exp(eta) * increment
        value = event * (log_shape + (shape - 1.0) * log_t + eta) - cum
        return value, event - cum, -cum
    # variant 1: H(t) = (exp(eta) t)^shape
    cum = np.exp(shape * eta) * increment
    value = event * (log_shape + shape * eta + (shape - 1.0) * log_t) - cum
    return value, shape * (event - cum), -shape * shape * cum


def loglik(
    family: Family,
    y,
    eta,
    hyper: Optional[float] = None,
    offset=0.0,
    ntrials=1,
    entry=0.0,
    exit=None,
    variant: int = 0,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Row-wise log-likelihood with derivatives in eta.

    Args:
        family: Observation family
        y: Responses (event indicators for survival families)
        eta: Linear predictor values
        hyper: Residual log-precision (gaussian, lognormal) or log-shape (weibull_surv)
        offset: Additive offset on the log-mean scale (poisson, poisson_surv)
        ntrials: Binomial trials
        entry, exit: Exposure window of survival rows
        variant: Weibull parametrisation (0 or 1)

    Returns:
        Tuple of (value, first derivative, second derivative) arrays
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    y, eta = np.broadcast_arrays(y, eta)
    _check_eta(eta)
    kind = family.kind

    if kind in (FamilyKind.GAUSSIAN, FamilyKind.LOGNORMAL):
        if hyper is None:
            raise LikelihoodDomainError(f"{kind.value} needs a residual log-precision")
        z = y
        jacobian = 0.0
        if kind == FamilyKind.LOGNORMAL:
            if np.any(y <= 0):
                raise LikelihoodDomainError("lognormal responses must be positive")
            z = np.log(y)
            jacobian = -z
        tau = float(np.exp(hyper))
        resid = z - eta
        value = 0.5 * hyper - 0.5 * LOG_2PI - 0.5 * tau * resid ** 2 + jacobian
        return value, tau * resid, np.full_like(eta, -tau)

    if kind in (FamilyKind.POISSON, FamilyKind.POISSON_SURV):
        if np.any(y < 0) or np.any(y != np.floor(y)):
            raise LikelihoodDomainError("Poisson responses must be non-negative integers")
        lin = eta + np.asarray(offset, dtype=float)
        mu = np.exp(lin)
        value = y * lin - mu - gammaln(y + 1.0)
        return value, y - mu, -mu

    if kind == FamilyKind.BINOMIAL:
        n = np.asarray(ntrials, dtype=float)
        if np.any(n < 1) or np.any(y < 0) or np.any(y > n) or np.any(y != np.floor(y)):
            raise LikelihoodDomainError("Binomial responses must lie in {0, ..., ntrials}")
        p = expit(eta)
        log_comb = gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
        value = log_comb + y * eta - n * np.logaddexp(0.0, eta)
        return value, y - n * p, -n * p * (1.0 - p)

    # survival families
    if np.any((y != 0) & (y != 1)):
        raise LikelihoodDomainError("Survival event indicators must be 0 or 1")
    if exit is None:
        raise LikelihoodDomainError(f"{kind.value} needs exit times")
    entry_arr = np.broadcast_to(np.asarray(entry, dtype=float), eta.shape)
    exit_arr = np.broadcast_to(np.asarray(exit, dtype=float), eta.shape)
    return _survival_kernel(kind, y, eta, entry_arr, exit_arr, hyper, variant)


# ==================== Row table ====================

@dataclass
class ObservationBlock:
    """Contiguous predictor rows sharing one family"""
    outcome: str
    family: Family
    rows: slice
    y: np.ndarray
    offset: Optional[np.ndarray] = None
    ntrials: Optional[np.ndarray] = None
    entry: Optional[np.ndarray] = None
    exit: Optional[np.ndarray] = None
    hyper_index: Optional[int] = None
    variant: int = 0
    unit: Optional[np.ndarray] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        n = self.rows.stop - self.rows.start
        if self.y.shape != (n,):
            raise ValueError(f"Block {self.outcome}: response length {self.y.shape} != {n}")

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.y)

    def evaluate(self, eta: np.ndarray, omega: np.ndarray):
        """Log-likelihood pieces of this block for its slice of eta"""
        mask = self.observed
        value = np.zeros_like(eta)
        d1 = np.zeros_like(eta)
        d2 = np.zeros_like(eta)
        if not mask.any():
            return value, d1, d2
        hyper = None if self.hyper_index is None else float(omega[self.hyper_index])

        def pick(arr, default):
            return default if arr is None else arr[mask]

        v, g, h = loglik(
            self.family, self.y[mask], eta[mask], hyper,
            offset=pick(self.offset, 0.0),
            ntrials=pick(self.ntrials, 1),
            entry=pick(self.entry, 0.0),
            exit=pick(self.exit, None),
            variant=self.variant,
        )
        value[mask], d1[mask], d2[mask] = v, g, h
        return value, d1, d2

    def evaluate_rows(self, local: np.ndarray, eta: np.ndarray, omega: np.ndarray) -> np.ndarray:
        """Log-likelihood values of the block rows at positions `local`"""
        value = np.zeros(local.size)
        keep = self.observed[local]
        if not keep.any():
            return value
        idx = local[keep]
        hyper = None if self.hyper_index is None else float(omega[self.hyper_index])

        def pick(arr, default):
            return default if arr is None else arr[idx]

        value[keep] = loglik(
            self.family, self.y[idx], eta[keep], hyper,
            offset=pick(self.offset, 0.0),
            ntrials=pick(self.ntrials, 1),
            entry=pick(self.entry, 0.0),
            exit=pick(self.exit, None),
            variant=self.variant,
        )[0]
        return value


@dataclass
class AugmentedDataset:
    """All predictor rows of the joint model, longitudinal then survival"""
    blocks: List[ObservationBlock] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return max((b.rows.stop for b in self.blocks), default=0)

    def row_loglik(self, eta: np.ndarray, omega: np.ndarray):
        """Per-row (value, d1, d2); rows with missing response are zero"""
        eta = np.asarray(eta, dtype=float)
        value = np.zeros(self.n_rows)
        d1 = np.zeros(self.n_rows)
        d2 = np.zeros(self.n_rows)
        for block in self.blocks:
            v, g, h = block.evaluate(eta[block.rows], omega)
            value[block.rows], d1[block.rows], d2[block.rows] = v, g, h
        return value, d1, d2

    def rows_loglik(self, rows: np.ndarray, eta_rows: np.ndarray, omega: np.ndarray) -> np.ndarray:
        """Per-row values for the sorted global row indices `rows` only"""
        rows = np.asarray(rows, dtype=np.int64)
        eta_rows = np.asarray(eta_rows, dtype=float)
        value = np.zeros(rows.size)
        for block in self.blocks:
            inside = (rows >= block.rows.start) & (rows < block.rows.stop)
            if inside.any():
                value[inside] = block.evaluate_rows(rows[inside] - block.rows.start, eta_rows[inside], omega)
        return value

    def observation_units(self) -> np.ndarray:
        """Unit label per row; augmented survival rows of one subject share a unit"""
        units = np.full(self.n_rows, -1, dtype=np.int64)
        next_unit = 0
        for block in self.blocks:
            n = block.rows.stop - block.rows.start
            if block.unit is None:
                units[block.rows] = next_unit + np.arange(n)
                next_unit += n
            else:
                _, local = np.unique(block.unit, return_inverse=True)
                units[block.rows] = next_unit + local
                next_unit += int(local.max()) + 1 if n else 0
        return units

    def observed_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_rows, dtype=bool)
        for block in self.blocks:
            mask[block.rows] = block.observed
        return mask


def total_loglik(augmented: AugmentedDataset, eta: np.ndarray, omega: np.ndarray):
    """
    Sum of observed-row log-likelihoods at eta.

    Returns:
        Tuple of (scalar value, d/deta per row, d2/deta2 per row)
    """
    value, d1, d2 = augmented.row_loglik(eta, omega)
    return float(np.sum(value)), d1, d2


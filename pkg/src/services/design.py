"""
Design rows for longitudinal and survival predictors.

Terms are explicit products of factors. A factor is the constant "1", a
data column, or a registered function of time; time functions are what make
a predictor evaluable at arbitrary times for hazard integration and for the
current-slope derivative.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse

from src.services.errors import DataValidationError, ModelSpecError

if TYPE_CHECKING:
    from src.services.assembly import LatentLayout

logger = logging.getLogger(__name__)

INTERCEPT = "1"


# ==================== Terms ====================

@dataclass(frozen=True)
class Term:
    """Product of factors; the empty product is the intercept"""
    factors: Tuple[str, ...] = ()

    @classmethod
    def parse(cls, value: Union[str, Sequence[str]]) -> "Term":
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, (list, tuple)) or not value:
            raise ModelSpecError(f"Malformed term: {value!r}")
        factors = []
        for factor in value:
            if not isinstance(factor, str) or not factor.strip():
                raise ModelSpecError(f"Malformed term factor: {factor!r} in {value!r}")
            if factor in (INTERCEPT, "Intercept"):
                continue
            factors.append(factor.strip())
        return cls(tuple(factors))

    @property
    def is_intercept(self) -> bool:
        return not self.factors

    @property
    def label(self) -> str:
        return "Intercept" if self.is_intercept else ":".join(self.factors)

    def to_config(self) -> List[str]:
        return [INTERCEPT] if self.is_intercept else list(self.factors)


# ==================== Time bases ====================

@dataclass(frozen=True)
class TimeBasis:
    """Vector-valued function of time with its derivative"""
    name: str
    n_columns: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]

    def __call__(self, t) -> np.ndarray:
        return self.evaluator(np.atleast_1d(np.asarray(t, dtype=float)))


def ns_basis(knots: Sequence[float], boundary: Tuple[float, float], name: str = "ns") -> TimeBasis:
    """
    Natural cubic spline basis in truncated-power form.

    With knots xi_1 < ... < xi_K (boundary knots included) the columns are
    x - xi_1 and d_k(x) - d_{K-1}(x) for k = 1..K-2, where
    d_k(x) = [(x - xi_k)^3_+ - (x - xi_K)^3_+] / (xi_K - xi_k).
    Every column vanishes at the lower boundary and is linear outside it.
    """
    low, high = float(boundary[0]), float(boundary[1])
    interior = np.asarray(sorted(float(k) for k in knots), dtype=float)
    if not low < high:
        raise ModelSpecError(f"Spline boundary must be increasing, got ({low}, {high})")
    if interior.size and (interior.min() <= low or interior.max() >= high):
        raise ModelSpecError(f"Spline knots {interior.tolist()} outside boundary ({low}, {high})")
    xi = np.concatenate([[low], interior, [high]])
    last = xi[-1]

    def _d(x: np.ndarray, k: int, power: int) -> np.ndarray:
        scale = 1.0 if power == 3 else 3.0
        return scale * (np.maximum(x - xi[k], 0.0) ** power - np.maximum(x - last, 0.0) ** power) / (last - xi[k])

    def evaluator(t: np.ndarray) -> np.ndarray:
        x = np.asarray(t, dtype=float)
        cols = [x - low]
        tail = _d(x, len(xi) - 2, 3)
        for k in range(len(xi) - 2):
            cols.append(_d(x, k, 3) - tail)
        return np.column_stack(cols)

    def derivative(t: np.ndarray) -> np.ndarray:
        x = np.asarray(t, dtype=float)
        cols = [np.ones_like(x)]
        tail = _d(x, len(xi) - 2, 2)
        for k in range(len(xi) - 2):
            cols.append(_d(x, k, 2) - tail)
        return np.column_stack(cols)

    return TimeBasis(name=name, n_columns=len(xi) - 1, evaluator=evaluator, derivative=derivative)


class TimeFunctionRegistry:
    """Named scalar functions of time usable as term factors"""

    def __init__(self, time_column: str):
        self.time_column = time_column
        self._functions: Dict[str, Tuple[Callable, Callable]] = {}
        self._bases: Dict[str, TimeBasis] = {}
        self.register("identity", lambda t: t, np.ones_like)

    def register(self, name: str, fn: Callable, derivative: Callable) -> None:
        self._functions[name] = (fn, derivative)

    def register_basis(self, basis: TimeBasis) -> None:
        """Expose basis columns as <name>1 .. <name>K"""
        self._bases[basis.name] = basis
        for j in range(basis.n_columns):
            self.register(
                f"{basis.name}{j + 1}",
                lambda t, j=j: basis(t)[:, j],
                lambda t, j=j: basis.derivative(np.atleast_1d(t))[:, j],
            )

    @classmethod
    def with_spline(cls, time_column: str, knots: Optional[Sequence[float]], max_time: float) -> "TimeFunctionRegistry":
        registry = cls(time_column)
        if knots:
            registry.register_basis(ns_basis(knots, (0.0, max_time), name="ns"))
        return registry

    def is_time_factor(self, name: str) -> bool:
        return name == self.time_column or name in self._functions

    def evaluate(self, name: str, t: np.ndarray) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if name == self.time_column:
            return t.copy()
        return np.asarray(self._functions[name][0](t), dtype=float)

    def evaluate_derivative(self, name: str, t: np.ndarray) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if name == self.time_column:
            return np.ones_like(t)
        return np.asarray(self._functions[name][1](t), dtype=float)

    @property
    def names(self) -> List[str]:
        return sorted(self._functions)

    def basis(self, name: str) -> TimeBasis:
        return self._bases[name]


def term_values(
    terms: Sequence[Term],
    covariates: Mapping[str, np.ndarray],
    times: np.ndarray,
    registry: TimeFunctionRegistry,
) -> np.ndarray:
    """Evaluate terms row-wise; time factors use `times`, others read `covariates`"""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    out = np.ones((times.size, len(terms)))
    for j, term in enumerate(terms):
        for factor in term.factors:
            if registry.is_time_factor(factor):
                out[:, j] *= registry.evaluate(factor, times)
            else:
                if factor not in covariates:
                    raise DataValidationError(f"Missing column '{factor}' for term {term.label}")
                out[:, j] *= np.asarray(covariates[factor], dtype=float)
    return out


def term_derivatives(
    terms: Sequence[Term],
    covariates: Mapping[str, np.ndarray],
    times: np.ndarray,
    registry: TimeFunctionRegistry,
    delta: float,
) -> np.ndarray:
    """Central difference of term values in time with step delta"""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    upper = term_values(terms, covariates, times + delta, registry)
    lower = term_values(terms, covariates, times - delta, registry)
    return (upper - lower) / (2.0 * delta)


# ==================== Design rows ====================

@dataclass(frozen=True)
class DesignRow:
    """One sparse predictor row"""
    indices: np.ndarray
    values: np.ndarray
    outcome: str
    subject: object
    time: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise DataValidationError(f"Non-finite design value for subject {self.subject} ({self.outcome})")

    def dot(self, u: np.ndarray) -> float:
        return float(np.dot(self.values, u[self.indices]))


@dataclass
class DesignBlock:
    """Predictor rows of one outcome as a sparse matrix over the latent field"""
    outcome: str
    matrix: sparse.csr_matrix
    subjects: np.ndarray
    times: np.ndarray

    def rows(self) -> Iterator[DesignRow]:
        for i in range(self.matrix.shape[0]):
            start, stop = self.matrix.indptr[i], self.matrix.indptr[i + 1]
            yield DesignRow(
                indices=self.matrix.indices[start:stop].copy(),
                values=self.matrix.data[start:stop].copy(),
                outcome=self.outcome,
                subject=self.subjects[i],
                time=float(self.times[i]),
            )

    def __len__(self) -> int:
        return self.matrix.shape[0]


def _assemble(n_latent: int, blocks: List[Tuple[np.ndarray, np.ndarray]]) -> sparse.csr_matrix:
    """Build a CSR matrix from (column index matrix, value matrix) pairs of equal row count"""
    n_rows = blocks[0][0].shape[0] if blocks else 0
    rows, cols, vals = [], [], []
    for col_idx, values in blocks:
        if values.size == 0:
            continue
        r = np.repeat(np.arange(n_rows), values.shape[1])
        rows.append(r)
        cols.append(col_idx.ravel())
        vals.append(values.ravel())
    if not rows:
        return sparse.csr_matrix((n_rows, n_latent))
    matrix = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_rows, n_latent)
    ).tocsr()
    matrix.sum_duplicates()
    return matrix


def predictor_matrix(
    outcome: str,
    fixed_terms: Sequence[Term],
    random_terms: Sequence[Term],
    covariates: Mapping[str, np.ndarray],
    times: np.ndarray,
    subjects: np.ndarray,
    layout: "LatentLayout",
    registry: TimeFunctionRegistry,
    part: str = "full",
    derivative_delta: Optional[float] = None,
) -> sparse.csr_matrix:
    """
    Rows of eta_k(t) (part="full") or of its random part Z'b (part="random").

    With derivative_delta the rows are central differences in time.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    n = times.size

    def values(terms):
        if derivative_delta is None:
            return term_values(terms, covariates, times, registry)
        return term_derivatives(terms, covariates, times, registry, derivative_delta)

    blocks = []
    if part == "full" and fixed_terms:
        fixed_cols = np.arange(layout.fixed_slice(outcome).start, layout.fixed_slice(outcome).stop)
        blocks.append((np.tile(fixed_cols, (n, 1)), values(fixed_terms)))
    if random_terms:
        blocks.append((layout.random_columns(outcome, subjects), values(random_terms)))
    return _assemble(layout.n_latent, blocks)


def build_rows(spec, data: pd.DataFrame, layout: "LatentLayout", registry: TimeFunctionRegistry, outcome: str) -> DesignBlock:
    """
    Design rows for every observation of a longitudinal submodel.

    Random-effect columns point at the subject's block; interactions are
    products of their factors.
    """
    id_column = layout.id_column
    subjects = data[id_column].to_numpy()
    times = data[registry.time_column].to_numpy(dtype=float)
    covariates = {c: data[c].to_numpy() for c in data.columns}
    matrix = predictor_matrix(
        outcome, spec.fixed_terms, spec.random_terms, covariates, times, subjects, layout, registry
    )
    logger.debug(f"Built {matrix.shape[0]} design rows for {outcome} ({matrix.nnz} non-zeros)")
    return DesignBlock(outcome=outcome, matrix=matrix, subjects=subjects, times=times)


def eval_predictor_basis(
    spec,
    covariates: Mapping[str, float],
    subject,
    t: float,
    layout: "LatentLayout",
    registry: TimeFunctionRegistry,
    outcome: str,
    derivative_delta: Optional[float] = None,
) -> DesignRow:
    """Design row of eta_k(t) for one subject at an arbitrary time"""
    if t < 0:
        raise ValueError(f"Evaluation time must be non-negative, got {t}")
    cov = {k: np.atleast_1d(v) for k, v in covariates.items()}
    matrix = predictor_matrix(
        outcome, spec.fixed_terms, spec.random_terms, cov, np.array([t]), np.array([subject]),
        layout, registry, derivative_delta=derivative_delta,
    )
    return DesignRow(
        indices=matrix.indices.copy(), values=matrix.data.copy(), outcome=outcome, subject=subject, time=float(t)
    )

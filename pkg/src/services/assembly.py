"""
Joint model assembly.

Lays out the latent field u and the hyperparameter vector omega, builds the
block-diagonal prior precision Q_prior(omega) and the predictor map
eta = A(omega) u, where association scalars scale precomputed sparse blocks.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.stats import wishart

from src.services.design import Term, TimeFunctionRegistry, _assemble, build_rows, predictor_matrix, term_values
from src.services.errors import DataValidationError, JointModelError, ModelSpecError
from src.services.likelihoods import AugmentedDataset, Family, FamilyKind, ObservationBlock, total_loglik
from src.services.model_spec import (
    AssociationKind,
    BaselineKind,
    ControlOptions,
    FixedEffectPrior,
    GaussianPrior,
    LogGammaPrior,
    ModelSpec,
    WishartPrior,
    validate_data,
)
from src.services.surv_augment import (
    Cutpoints,
    PseudoRowTable,
    decompose_table,
    make_cutpoints,
    rw_precision,
    single_row_table,
)

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
RW_INIT = 2.0


# ==================== Cholesky parametrisation ====================

def n_cholesky_params(dim: int, correlated: bool) -> int:
    return dim + dim * (dim - 1) // 2 if correlated else dim


def cholesky_factor(theta: Sequence[float], dim: int, correlated: bool = True) -> np.ndarray:
    """Lower factor with diagonal exp(theta[:dim]) and row-wise off-diagonals"""
    theta = np.asarray(theta, dtype=float)
    if theta.size != n_cholesky_params(dim, correlated):
        raise ValueError(f"Expected {n_cholesky_params(dim, correlated)} parameters, got {theta.size}")
    L = np.diag(np.exp(theta[:dim]))
    if correlated:
        L[np.tril_indices(dim, -1)] = theta[dim:]
    return L


def precision_from_theta(theta: Sequence[float], dim: int, correlated: bool = True) -> np.ndarray:
    L = cholesky_factor(theta, dim, correlated)
    return L @ L.T


def theta_from_precision(P: np.ndarray, correlated: bool = True) -> np.ndarray:
    """Inverse of precision_from_theta"""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if not correlated:
        return 0.5 * np.log(np.diag(P))
    L = np.linalg.cholesky(P)
    return np.concatenate([np.log(np.diag(L)), L[np.tril_indices(P.shape[0], -1)]])


# ==================== Priors ====================

@dataclass(frozen=True)
class PriorSpec:
    """Prior families of the latent field and of omega"""
    fixed: FixedEffectPrior
    random: WishartPrior
    assoc: GaussianPrior
    sre_ind: GaussianPrior
    rw: LogGammaPrior
    residual: LogGammaPrior
    weibull_shape: GaussianPrior

    @classmethod
    def from_controls(cls, controls: ControlOptions) -> "PriorSpec":
        return cls(
            fixed=controls.prior_fixed, random=controls.prior_random, assoc=controls.prior_assoc,
            sre_ind=controls.prior_sre_ind, rw=controls.prior_rw, residual=controls.prior_residual,
            weibull_shape=controls.prior_weibull_shape,
        )

    def describe(self) -> Dict[str, Dict[str, float]]:
        return {
            "fixed effects": {"mean": self.fixed.mean, "prec": self.fixed.prec,
                              "mean.intercept": self.fixed.mean_intercept, "prec.intercept": self.fixed.prec_intercept},
            "random effects (Wishart)": {"r": self.random.r, "R": self.random.R},
            "association": {"mean": self.assoc.mean, "prec": self.assoc.prec},
            "association SRE_ind": {"mean": self.sre_ind.mean, "prec": self.sre_ind.prec},
            "random walk log-precision (log-gamma)": {"shape": self.rw.shape, "rate": self.rw.rate},
            "residual log-precision (log-gamma)": {"shape": self.residual.shape, "rate": self.residual.rate},
            "Weibull log-shape": {"mean": self.weibull_shape.mean, "prec": self.weibull_shape.prec},
        }


def wishart_log_prior(theta: np.ndarray, dim: int, correlated: bool, prior: WishartPrior) -> float:
    """Wishart(r, R I) density of P = L L' on the log-Cholesky scale"""
    theta = np.asarray(theta, dtype=float)
    if not correlated:
        p = np.exp(2.0 * theta)
        return float(sum(wishart.logpdf(pj, df=prior.r, scale=1.0 / prior.R) for pj in p)
                     + dim * np.log(2.0) + 2.0 * theta.sum())
    P = precision_from_theta(theta, dim, True)
    if dim == 1:
        value = wishart.logpdf(P[0, 0], df=prior.r, scale=1.0 / prior.R)
    else:
        value = wishart.logpdf(P, df=prior.r, scale=np.eye(dim) / prior.R)
    exponents = dim - np.arange(1, dim + 1) + 2.0
    return float(value + dim * np.log(2.0) + np.dot(exponents, theta[:dim]))


# ==================== Layouts ====================

@dataclass(frozen=True)
class REGroup:
    """Random effects sharing one precision matrix, one block per subject"""
    name: str
    members: Tuple[Tuple[str, int], ...]
    labels: Tuple[str, ...]
    correlated: bool
    start: int
    n_subjects: int

    @property
    def dim(self) -> int:
        return sum(n for _, n in self.members)

    @property
    def stop(self) -> int:
        return self.start + self.dim * self.n_subjects

    @property
    def n_params(self) -> int:
        return n_cholesky_params(self.dim, self.correlated)

    def member_offset(self, outcome: str) -> int:
        offset = 0
        for name, n in self.members:
            if name == outcome:
                return offset
            offset += n
        raise KeyError(outcome)


@dataclass(frozen=True)
class HyperEntry:
    name: str
    kind: str
    outcome: Optional[str] = None
    group: Optional[str] = None


@dataclass(frozen=True)
class AssocTerm:
    """One association scalar phi and what it multiplies"""
    name: str
    kind: str
    long_outcome: str
    surv_outcome: str
    index: int
    random_index: Optional[int] = None


@dataclass
class HyperLayout:
    """Positions of every hyperparameter in omega"""
    entries: List[HyperEntry] = field(default_factory=list)
    assoc: List[AssocTerm] = field(default_factory=list)
    residual: Dict[str, int] = field(default_factory=dict)
    re_groups: Dict[str, slice] = field(default_factory=dict)
    rw: Dict[str, int] = field(default_factory=dict)
    weibull: Dict[str, int] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def _add(self, entry: HyperEntry) -> int:
        self.entries.append(entry)
        return len(self.entries) - 1


@dataclass
class LatentLayout:
    """Block index map of the latent field"""
    id_column: str
    subjects: np.ndarray
    fixed: Dict[str, slice]
    fixed_terms: Dict[str, Tuple[Term, ...]]
    groups: Tuple[REGroup, ...]
    baselines: Dict[str, slice]
    n_latent: int
    hyper: HyperLayout
    _positions: Dict[object, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._positions = {s: i for i, s in enumerate(self.subjects.tolist())}

    def fixed_slice(self, outcome: str) -> slice:
        return self.fixed[outcome]

    def baseline_slice(self, outcome: str) -> slice:
        return self.baselines[outcome]

    def group_of(self, outcome: str) -> Tuple[REGroup, int]:
        for group in self.groups:
            if any(name == outcome for name, _ in group.members):
                return group, group.member_offset(outcome)
        raise KeyError(f"No random effects for {outcome}")

    def subject_positions(self, subjects) -> np.ndarray:
        try:
            return np.fromiter((self._positions[s] for s in np.asarray(subjects, dtype=object).tolist()),
                               dtype=np.int64, count=len(subjects))
        except KeyError as e:
            raise DataValidationError(f"Unknown subject {e.args[0]}")

    def random_columns(self, outcome: str, subjects) -> np.ndarray:
        """(n, q) latent columns of the random effects of `outcome` for each row's subject"""
        group, offset = self.group_of(outcome)
        q = dict(group.members)[outcome]
        positions = self.subject_positions(subjects)
        return group.start + positions[:, None] * group.dim + offset + np.arange(q)[None, :]

    def fixed_labels(self, outcome: str) -> List[str]:
        return [f"{t.label}_{outcome}" for t in self.fixed_terms[outcome]]

    def intercept_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_latent, dtype=bool)
        for outcome, sl in self.fixed.items():
            mask[sl] = [t.is_intercept for t in self.fixed_terms[outcome]]
        return mask

    @property
    def n_fixed(self) -> int:
        return max((sl.stop for sl in self.fixed.values()), default=0)


def allocate_layout(spec: ModelSpec, data: Optional[pd.DataFrame] = None) -> LatentLayout:
    """
    Deterministic latent ordering: fixed effects (longitudinal then survival),
    random-effect groups by (group, subject), frailties, then RW baselines.

    Omega follows: residual log-precisions, RE Cholesky parameters per group,
    RW log-precisions, Weibull log-shapes, association scalars.
    """
    if data is not None:
        subjects = np.asarray(list(dict.fromkeys(data[spec.id_column].tolist())), dtype=object)
    else:
        subjects = spec.subjects()
    n_subjects = len(subjects)

    cursor = 0
    fixed, fixed_terms = {}, {}
    for m in list(spec.longitudinal) + list(spec.survival):
        fixed[m.name] = slice(cursor, cursor + len(m.fixed_terms))
        fixed_terms[m.name] = m.fixed_terms
        cursor += len(m.fixed_terms)

    groups: List[REGroup] = []
    with_random = [m for m in spec.longitudinal if m.random_terms]
    if spec.cor_long and len(with_random) > 1:
        members = tuple((m.name, m.n_random) for m in with_random)
        labels = tuple(f"{t.label}_{m.name}" for m in with_random for t in m.random_terms)
        group = REGroup("_".join(m.name for m in with_random), members, labels, True, cursor, n_subjects)
        groups.append(group)
        cursor = group.stop
    else:
        for m in with_random:
            correlated = spec.cor_long or m.cor_re
            labels = tuple(f"{t.label}_{m.name}" for t in m.random_terms)
            group = REGroup(m.name, ((m.name, m.n_random),), labels, correlated, cursor, n_subjects)
            groups.append(group)
            cursor = group.stop
    for s in spec.survival:
        if s.frailty:
            group = REGroup(f"frailty_{s.name}", ((s.name, 1),), (f"Frailty_{s.name}",), True, cursor, n_subjects)
            groups.append(group)
            cursor = group.stop

    baselines = {}
    cuts = survival_cutpoints(spec)
    for s in spec.survival:
        if s.baseline.is_rw:
            m = cuts[s.name].n_intervals
            baselines[s.name] = slice(cursor, cursor + m)
            cursor += m

    hyper = HyperLayout()
    for m in spec.longitudinal:
        if m.family.has_precision:
            hyper.residual[m.name] = hyper._add(HyperEntry(f"log_prec_{m.name}", "residual", outcome=m.name))
    for group in groups:
        start = hyper.dim
        for i in range(group.dim):
            hyper._add(HyperEntry(f"re_{group.name}_logdiag{i + 1}", "re_logdiag", group=group.name))
        if group.correlated:
            for i, j in zip(*np.tril_indices(group.dim, -1)):
                hyper._add(HyperEntry(f"re_{group.name}_offdiag{i + 1}{j + 1}", "re_offdiag", group=group.name))
        hyper.re_groups[group.name] = slice(start, hyper.dim)
    for s in spec.survival:
        if s.baseline.is_rw:
            hyper.rw[s.name] = hyper._add(HyperEntry(f"rw_logprec_{s.name}", "rw", outcome=s.name))
    for s in spec.survival:
        if s.baseline == BaselineKind.WEIBULL:
            hyper.weibull[s.name] = hyper._add(HyperEntry(f"weibull_logshape_{s.name}", "weibull_shape", outcome=s.name))
    for k, m in enumerate(spec.longitudinal):
        for j, s in enumerate(spec.survival):
            kind = spec.assoc[k][j]
            if kind == AssociationKind.NONE:
                continue
            if kind == AssociationKind.SRE_IND:
                for q, term in enumerate(m.random_terms):
                    name = f"SRE_{term.label}_{m.name}_{s.name}"
                    idx = hyper._add(HyperEntry(name, "assoc", outcome=s.name))
                    hyper.assoc.append(AssocTerm(name, "SRE_ind", m.name, s.name, idx, random_index=q))
                continue
            parts = ["CV", "CS"] if kind == AssociationKind.CV_CS else [kind.value]
            for part in parts:
                name = f"{part}_{m.name}_{s.name}"
                idx = hyper._add(HyperEntry(name, "assoc", outcome=s.name))
                hyper.assoc.append(AssocTerm(name, part, m.name, s.name, idx))

    layout = LatentLayout(
        id_column=spec.id_column, subjects=subjects, fixed=fixed, fixed_terms=fixed_terms,
        groups=tuple(groups), baselines=baselines, n_latent=cursor, hyper=hyper,
    )
    logger.info(f"Allocated layout: {layout.n_latent} latent values, {hyper.dim} hyperparameters, "
                f"{len(groups)} random-effect groups, {n_subjects} subjects")
    return layout


def survival_cutpoints(spec: ModelSpec) -> Dict[str, Cutpoints]:
    """Baseline cutpoints of every survival submodel"""
    cuts = {}
    for s in spec.survival:
        max_exit = float(np.nanmax(spec.surv_data[s.exit_time].to_numpy(dtype=float)))
        if s.cutpoints is not None:
            cuts[s.name] = Cutpoints.from_explicit(s.cutpoints, max_exit)
        else:
            cuts[s.name] = make_cutpoints(s.n_intervals, max_exit)
    return cuts


# ==================== Prior precision ====================

def _check_omega(omega: np.ndarray, layout: LatentLayout) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (layout.hyper.dim,):
        raise JointModelError(f"omega has shape {omega.shape}, expected ({layout.hyper.dim},)")
    if not np.all(np.isfinite(omega)):
        raise JointModelError(f"Non-finite hyperparameters: {omega}")
    return omega


def group_precision(layout: LatentLayout, omega: np.ndarray, group: REGroup) -> np.ndarray:
    theta = omega[layout.hyper.re_groups[group.name]]
    return precision_from_theta(theta, group.dim, group.correlated)


def prior_precision(layout: LatentLayout, omega, priors: PriorSpec, rw_structures=None, rw_jitter: float = 1e-5) -> sparse.csc_matrix:
    """Block-diagonal Q_prior(omega); RW blocks carry a small ridge and are conditioned on sum-to-zero later"""
    omega = _check_omega(omega, layout)
    blocks = []
    fixed_diag = np.where(layout.intercept_mask()[:layout.n_fixed], priors.fixed.prec_intercept, priors.fixed.prec)
    if layout.n_fixed:
        blocks.append(sparse.diags(fixed_diag))
    for group in layout.groups:
        P = group_precision(layout, omega, group)
        blocks.append(sparse.kron(sparse.identity(group.n_subjects), sparse.csr_matrix(P)))
    for outcome, sl in layout.baselines.items():
        R = rw_structures[outcome] if rw_structures is not None else rw_precision(1, sl.stop - sl.start)
        kappa = np.exp(omega[layout.hyper.rw[outcome]])
        blocks.append(kappa * R + rw_jitter * sparse.identity(R.shape[0]))
    if not blocks:
        return sparse.csc_matrix((0, 0))
    return sparse.block_diag(blocks, format="csc")


def prior_mean(layout: LatentLayout, priors: PriorSpec) -> np.ndarray:
    mu = np.zeros(layout.n_latent)
    mask = layout.intercept_mask()
    fixed = np.zeros(layout.n_latent, dtype=bool)
    fixed[:layout.n_fixed] = True
    mu[fixed & mask] = priors.fixed.mean_intercept
    mu[fixed & ~mask] = priors.fixed.mean
    return mu


def log_prior_omega(omega, priors: PriorSpec, layout: LatentLayout) -> float:
    """Sum of hyperparameter log priors on the optimisation scale"""
    omega = _check_omega(omega, layout)
    hyper = layout.hyper
    total = 0.0
    for idx in hyper.residual.values():
        total += priors.residual.logpdf(omega[idx])
    for group in layout.groups:
        total += wishart_log_prior(omega[hyper.re_groups[group.name]], group.dim, group.correlated, priors.random)
    for idx in hyper.rw.values():
        total += priors.rw.logpdf(omega[idx])
    for idx in hyper.weibull.values():
        total += priors.weibull_shape.logpdf(omega[idx])
    for term in hyper.assoc:
        prior = priors.sre_ind if term.kind == "SRE_ind" else priors.assoc
        total += prior.logpdf(omega[term.index])
    return float(total)


# ==================== Predictor map ====================

@dataclass
class PredictorMap:
    """eta = (base + sum_a omega[a] shared_a) u"""
    base: sparse.csr_matrix
    shared: Tuple[Tuple[int, sparse.csr_matrix], ...] = ()

    @property
    def shape(self) -> Tuple[int, int]:
        return self.base.shape

    def matrix(self, omega) -> sparse.csr_matrix:
        A = self.base.copy()
        for idx, M in self.shared:
            A = A + float(omega[idx]) * M
        return A.tocsr()

    def eta(self, u, omega) -> np.ndarray:
        eta = self.base @ u
        for idx, M in self.shared:
            eta = eta + float(omega[idx]) * (M @ u)
        return eta

    def shared_values(self, u) -> Dict[int, np.ndarray]:
        """d eta / d omega[a] for every association scalar"""
        return {idx: M @ u for idx, M in self.shared}


def _first_long_rows(spec: ModelSpec) -> Optional[pd.DataFrame]:
    if not spec.longitudinal:
        return None
    ordered = spec.long_data.sort_values([spec.id_column, spec.time_column], kind="mergesort")
    return ordered.groupby(spec.id_column, sort=False).head(1).set_index(spec.id_column)


def _subject_covariates(first_rows: pd.DataFrame, subjects: np.ndarray) -> Dict[str, np.ndarray]:
    missing = [s for s in pd.unique(subjects) if s not in first_rows.index]
    if missing:
        raise DataValidationError(f"Subject {missing[0]} has no longitudinal rows for association terms")
    picked = first_rows.loc[list(subjects)]
    return {c: picked[c].to_numpy() for c in picked.columns}


def survival_tables(spec: ModelSpec, cuts: Dict[str, Cutpoints]) -> Dict[str, PseudoRowTable]:
    """Pseudo-row table per survival submodel"""
    tables = {}
    data = spec.surv_data
    for j, s in enumerate(spec.survival):
        subjects = data[spec.id_column].to_numpy(dtype=object)
        entry = data[s.entry_time].to_numpy(dtype=float) if s.entry_time else np.zeros(len(data))
        exit = data[s.exit_time].to_numpy(dtype=float)
        event = data[s.event].to_numpy(dtype=float)
        time_dependent = any(spec.assoc[k][j].time_dependent for k in range(len(spec.longitudinal)))
        if s.baseline.is_rw or time_dependent:
            tables[s.name] = decompose_table(subjects, entry, exit, event, cuts[s.name], s.name)
        else:
            tables[s.name] = single_row_table(subjects, entry, exit, event, s.name)
        logger.debug(f"{s.name}: {len(tables[s.name])} survival rows from {len(data)} subjects")
    return tables


def wire_associations(
    spec: ModelSpec,
    layout: LatentLayout,
    pseudo_rows: Dict[str, PseudoRowTable],
    registry: Optional[TimeFunctionRegistry] = None,
) -> PredictorMap:
    """
    Sparse predictor map of every row: longitudinal design rows first, then
    survival rows with fixed, baseline, frailty and phi-scaled shared columns.
    """
    registry = registry or spec.time_registry()
    n_latent = layout.n_latent
    row_blocks: List[sparse.csr_matrix] = []
    shared_blocks: Dict[int, List[Tuple[int, sparse.csr_matrix]]] = {t.index: [] for t in layout.hyper.assoc}

    for m in spec.longitudinal:
        row_blocks.append(build_rows(m, spec.long_data, layout, registry, m.name).matrix)

    first_rows = _first_long_rows(spec)
    long_specs = {m.name: m for m in spec.longitudinal}
    delta = spec.cs_delta()
    for s in spec.survival:
        table = pseudo_rows[s.name]
        n = len(table)
        cov = {c: spec.surv_data[c].to_numpy()[table.source_row] for c in spec.surv_data.columns}
        fixed_cols = np.arange(layout.fixed_slice(s.name).start, layout.fixed_slice(s.name).stop)
        blocks = [(np.tile(fixed_cols, (n, 1)), term_values(s.fixed_terms, cov, table.eval_time, registry))]
        if s.name in layout.baselines:
            blocks.append(((layout.baseline_slice(s.name).start + table.interval - 1)[:, None], np.ones((n, 1))))
        if s.frailty:
            blocks.append((layout.random_columns(s.name, table.subject), np.ones((n, 1))))
        block_index = len(row_blocks)
        row_blocks.append(_assemble(n_latent, blocks))

        terms = [t for t in layout.hyper.assoc if t.surv_outcome == s.name]
        if not terms:
            continue
        long_cov = _subject_covariates(first_rows, table.subject)
        for term in terms:
            m = long_specs[term.long_outcome]
            if term.kind == "SRE_ind":
                cols = layout.random_columns(m.name, table.subject)[:, [term.random_index]]
                M = _assemble(n_latent, [(cols, np.ones((n, 1)))])
            else:
                M = predictor_matrix(
                    m.name, m.fixed_terms, m.random_terms, long_cov, table.eval_time, table.subject,
                    layout, registry,
                    part="random" if term.kind == "SRE" else "full",
                    derivative_delta=delta if term.kind == "CS" else None,
                )
            shared_blocks[term.index].append((block_index, M))

    heights = [b.shape[0] for b in row_blocks]
    base = sparse.vstack(row_blocks, format="csr") if row_blocks else sparse.csr_matrix((0, n_latent))
    shared = []
    for idx, pieces in shared_blocks.items():
        stacked = [sparse.csr_matrix((h, n_latent)) for h in heights]
        for block_index, M in pieces:
            stacked[block_index] = M
        shared.append((idx, sparse.vstack(stacked, format="csr")))
    return PredictorMap(base=base, shared=tuple(shared))


def build_dataset(spec: ModelSpec, layout: LatentLayout, pseudo_rows: Dict[str, PseudoRowTable]) -> AugmentedDataset:
    """Observation blocks in the same row order as wire_associations"""
    blocks = []
    cursor = 0
    for m in spec.longitudinal:
        n = len(spec.long_data)
        blocks.append(ObservationBlock(
            outcome=m.name, family=m.family, rows=slice(cursor, cursor + n),
            y=spec.long_data[m.response].to_numpy(dtype=float),
            ntrials=np.full(n, m.ntrials, dtype=float) if m.family.kind == FamilyKind.BINOMIAL else None,
            hyper_index=layout.hyper.residual.get(m.name),
        ))
        cursor += n
    for s in spec.survival:
        table = pseudo_rows[s.name]
        n = len(table)
        rows = slice(cursor, cursor + n)
        unit = layout.subject_positions(table.subject)
        if s.baseline.is_rw:
            blocks.append(ObservationBlock(
                outcome=s.name, family=Family(FamilyKind.POISSON_SURV), rows=rows, y=table.y,
                offset=table.offset, unit=unit,
            ))
        else:
            kind = FamilyKind.WEIBULL_SURV if s.baseline == BaselineKind.WEIBULL else FamilyKind.EXPONENTIAL_SURV
            blocks.append(ObservationBlock(
                outcome=s.name, family=Family(kind), rows=rows, y=table.y, entry=table.start, exit=table.stop,
                hyper_index=layout.hyper.weibull.get(s.name), variant=s.variant, unit=unit,
            ))
        cursor += n
    return AugmentedDataset(blocks)


def rw_constraints(layout: LatentLayout) -> Optional[sparse.csr_matrix]:
    """One sum-to-zero row per RW baseline block"""
    if not layout.baselines:
        return None
    rows, cols = [], []
    for r, sl in enumerate(layout.baselines.values()):
        cols.extend(range(sl.start, sl.stop))
        rows.extend([r] * (sl.stop - sl.start))
    return sparse.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(len(layout.baselines), layout.n_latent))


# ==================== Joint model ====================

@dataclass
class JointModel:
    """Everything the inference engine needs, fixed once assembled"""
    spec: ModelSpec
    layout: LatentLayout
    priors: PriorSpec
    predictor: PredictorMap
    dataset: AugmentedDataset
    tables: Dict[str, PseudoRowTable]
    cutpoints: Dict[str, Cutpoints]
    constraints: Optional[sparse.csr_matrix]
    registry: TimeFunctionRegistry
    rw_structures: Dict[str, sparse.csr_matrix] = field(default_factory=dict)

    @property
    def hyper(self) -> HyperLayout:
        return self.layout.hyper

    @property
    def n_latent(self) -> int:
        return self.layout.n_latent

    @property
    def n_hyper(self) -> int:
        return self.layout.hyper.dim

    @property
    def controls(self) -> ControlOptions:
        return self.spec.controls

    def prior_precision(self, omega) -> sparse.csc_matrix:
        return prior_precision(self.layout, omega, self.priors, self.rw_structures, self.controls.rw_jitter)

    def prior_mean(self) -> np.ndarray:
        return prior_mean(self.layout, self.priors)

    def prior_logdet(self, omega) -> float:
        """log det Q_prior(omega) block by block"""
        omega = _check_omega(omega, self.layout)
        mask = self.layout.intercept_mask()[:self.layout.n_fixed]
        fixed_diag = np.where(mask, self.priors.fixed.prec_intercept, self.priors.fixed.prec)
        total = float(np.sum(np.log(fixed_diag)))
        for group in self.layout.groups:
            L = cholesky_factor(omega[self.hyper.re_groups[group.name]], group.dim, group.correlated)
            total += group.n_subjects * 2.0 * float(np.sum(np.log(np.diag(L))))
        for outcome, R in self.rw_structures.items():
            block = np.exp(omega[self.hyper.rw[outcome]]) * R.toarray() + self.controls.rw_jitter * np.eye(R.shape[0])
            total += float(np.linalg.slogdet(block)[1])
        return total

    def prior_constraint_logdet(self, omega) -> float:
        """log det (C Q_prior^-1 C') for the sum-to-zero constraints"""
        total = 0.0
        for outcome, R in self.rw_structures.items():
            block = np.exp(omega[self.hyper.rw[outcome]]) * R.toarray() + self.controls.rw_jitter * np.eye(R.shape[0])
            ones = np.ones(R.shape[0])
            total += float(np.log(ones @ np.linalg.solve(block, ones)))
        return total

    def eta(self, u, omega) -> np.ndarray:
        return self.predictor.eta(u, omega)

    def loglik(self, u, omega):
        """(value, d1, d2) of the data log-likelihood at eta = A(omega) u"""
        return total_loglik(self.dataset, self.eta(u, omega), omega)

    def log_prior_omega(self, omega) -> float:
        return log_prior_omega(omega, self.priors, self.layout)

    def log_prior_latent(self, u, omega) -> float:
        """Gaussian log density of u under Q_prior(omega)"""
        Q = self.prior_precision(omega)
        r = np.asarray(u, dtype=float) - self.prior_mean()
        return float(0.5 * self.prior_logdet(omega) - 0.5 * self.n_latent * LOG_2PI - 0.5 * r @ (Q @ r))

    def log_joint(self, u, omega) -> float:
        """Unnormalised log posterior of (u, omega)"""
        return self.loglik(u, omega)[0] + self.log_prior_latent(u, omega) + self.log_prior_omega(omega)

    def initial_omega(self) -> np.ndarray:
        """Starting hyperparameters for the outer optimisation"""
        omega = np.zeros(self.n_hyper)
        for m in self.spec.longitudinal:
            if m.name in self.hyper.residual:
                y = self.spec.long_data[m.response].to_numpy(dtype=float)
                y = y[np.isfinite(y)]
                if m.family.kind == FamilyKind.LOGNORMAL:
                    y = np.log(y[y > 0])
                var = float(np.var(y)) if y.size > 1 else 0.0
                omega[self.hyper.residual[m.name]] = -np.log(var) if var > 0 else 0.0
        for idx in self.hyper.rw.values():
            omega[idx] = RW_INIT
        for term in self.hyper.assoc:
            omega[term.index] = self.controls.assoc_init
        return omega

    def latent_names(self) -> List[str]:
        names = [""] * self.n_latent
        for outcome, sl in self.layout.fixed.items():
            names[sl] = self.layout.fixed_labels(outcome)
        for group in self.layout.groups:
            for s, subject in enumerate(self.layout.subjects):
                for q, label in enumerate(group.labels):
                    names[group.start + s * group.dim + q] = f"{label}[{subject}]"
        for outcome, sl in self.layout.baselines.items():
            for i in range(sl.stop - sl.start):
                names[sl.start + i] = f"Baseline_{outcome}[{i + 1}]"
        return names


def assemble(spec: ModelSpec) -> JointModel:
    """Layout, augmentation, predictor map and observation table of a parsed model"""
    validate_data(spec)
    registry = spec.time_registry()
    layout = allocate_layout(spec)
    cuts = survival_cutpoints(spec)
    tables = survival_tables(spec, cuts)
    predictor = wire_associations(spec, layout, tables, registry)
    dataset = build_dataset(spec, layout, tables)
    if dataset.n_rows != predictor.shape[0]:
        raise ModelSpecError(f"Row mismatch: {dataset.n_rows} observations, {predictor.shape[0]} predictor rows")
    rw = {s.name: rw_precision(s.baseline.rw_order, cuts[s.name].n_intervals)
          for s in spec.survival if s.baseline.is_rw}
    model = JointModel(
        spec=spec, layout=layout, priors=PriorSpec.from_controls(spec.controls), predictor=predictor,
        dataset=dataset, tables=tables, cutpoints=cuts, constraints=rw_constraints(layout),
        registry=registry, rw_structures=rw,
    )
    logger.info(f"Assembled model: {dataset.n_rows} rows, {model.n_latent} latent, {model.n_hyper} hyperparameters")
    return model

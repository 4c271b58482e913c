"""
Model specification for joint longitudinal-survival models.

A JSON model document plus the longitudinal and survival tables are parsed
into an immutable ModelSpec with every control defaulted from the engine
configuration (config/engine.json).
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import gammaln

from config.config import ConfigValidator, config_loader
from src.services.design import Term, TimeFunctionRegistry
from src.services.errors import DataValidationError, ModelSpecError
from src.services.likelihoods import LONGITUDINAL_FAMILIES, Family, FamilyKind

logger = logging.getLogger(__name__)

MISSING_VALUES = [".", ""]


class AssociationKind(str, Enum):
    """Longitudinal-to-survival sharing options"""
    NONE = "none"
    CV = "CV"
    CS = "CS"
    CV_CS = "CV_CS"
    SRE = "SRE"
    SRE_IND = "SRE_ind"

    @classmethod
    def parse(cls, value: Optional[str]) -> "AssociationKind":
        if value in (None, "", "none", "NONE"):
            return cls.NONE
        try:
            return cls(value)
        except ValueError:
            raise ModelSpecError(f"Unknown association: {value}")

    @property
    def time_dependent(self) -> bool:
        return self in (AssociationKind.CV, AssociationKind.CS, AssociationKind.CV_CS, AssociationKind.SRE)

    @property
    def needs_random(self) -> bool:
        return self in (AssociationKind.SRE, AssociationKind.SRE_IND)


class BaselineKind(str, Enum):
    RW1 = "rw1"
    RW2 = "rw2"
    EXPONENTIAL = "exponential"
    WEIBULL = "weibull"

    @property
    def is_rw(self) -> bool:
        return self in (BaselineKind.RW1, BaselineKind.RW2)

    @property
    def rw_order(self) -> int:
        return 1 if self == BaselineKind.RW1 else 2


class IntStrategy(str, Enum):
    EB = "eb"
    GRID = "grid"


# ==================== Priors ====================

@dataclass(frozen=True)
class GaussianPrior:
    mean: float = 0.0
    prec: float = 0.01

    def __post_init__(self):
        if not self.prec > 0:
            raise ModelSpecError(f"Prior precision must be positive, got {self.prec}")

    def logpdf(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(np.sum(0.5 * np.log(self.prec / (2.0 * np.pi)) - 0.5 * self.prec * (x - self.mean) ** 2))


@dataclass(frozen=True)
class FixedEffectPrior:
    mean: float = 0.0
    prec: float = 0.01
    mean_intercept: float = 0.0
    prec_intercept: float = 0.01

    def __post_init__(self):
        if not (self.prec > 0 and self.prec_intercept > 0):
            raise ModelSpecError("Fixed-effect prior precisions must be positive")


@dataclass(frozen=True)
class WishartPrior:
    r: float = 10.0
    R: float = 1.0

    def __post_init__(self):
        if not (self.r > 0 and self.R > 0):
            raise ModelSpecError("Wishart prior needs r > 0 and R > 0")


@dataclass(frozen=True)
class LogGammaPrior:
    """Gamma(shape, rate) on exp(theta), expressed on theta"""
    shape: float = 1.0
    rate: float = 5e-5

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ModelSpecError("Log-gamma prior needs positive shape and rate")

    def logpdf(self, theta: float) -> float:
        return float(self.shape * np.log(self.rate) - gammaln(self.shape) + self.shape * theta - self.rate * np.exp(theta))


# ==================== Controls ====================

@dataclass(frozen=True)
class ControlOptions:
    """Priors and numerical controls; defaults come from config/engine.json"""
    prior_fixed: FixedEffectPrior = FixedEffectPrior()
    prior_random: WishartPrior = WishartPrior()
    prior_assoc: GaussianPrior = GaussianPrior(0.0, 0.01)
    prior_sre_ind: GaussianPrior = GaussianPrior(0.0, 1.0)
    prior_rw: LogGammaPrior = LogGammaPrior()
    prior_residual: LogGammaPrior = LogGammaPrior()
    prior_weibull_shape: GaussianPrior = GaussianPrior(0.0, 0.5)
    assoc_init: float = 0.1
    int_strategy: IntStrategy = IntStrategy.EB
    tolerance: float = 0.005
    h_step: float = 0.005
    seed: int = 0
    cs_delta_scale: float = 1e-4
    grid_dz: float = 1.0
    grid_log_drop: float = 2.5
    max_inner_iter: int = 100
    max_outer_iter: int = 200
    outer_gtol: float = 1e-3
    w_floor: float = 1e-8
    rw_jitter: float = 1e-5
    n_transform_samples: int = 10000
    n_ic_samples: int = 1000
    threads: Optional[int] = None

    def __post_init__(self):
        errors = []
        if not ConfigValidator.validate_positive(self.tolerance):
            errors.append(f"tolerance must be positive, got {self.tolerance}")
        if not ConfigValidator.validate_positive(self.h_step):
            errors.append(f"h_step must be positive, got {self.h_step}")
        if not ConfigValidator.validate_strategy(IntStrategy(self.int_strategy).value):
            errors.append(f"unknown int_strategy {self.int_strategy}")
        for name in ("grid_dz", "grid_log_drop", "outer_gtol", "w_floor", "rw_jitter", "cs_delta_scale"):
            if not ConfigValidator.validate_positive(getattr(self, name)):
                errors.append(f"{name} must be positive")
        if self.threads is not None and self.threads < 1:
            errors.append("threads must be >= 1")
        if errors:
            raise ModelSpecError("Invalid controls", errors)
        object.__setattr__(self, "int_strategy", IntStrategy(self.int_strategy))

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ControlOptions":
        """Build from a flat control document (engine.json layout)"""
        v = dict(values)
        threads = v.get("threads")
        if isinstance(threads, str):
            threads = int(threads) if threads.isdigit() else None
        try:
            return cls(
                prior_fixed=FixedEffectPrior(**v["prior_fixed"]),
                prior_random=WishartPrior(**v["prior_random"]),
                prior_assoc=GaussianPrior(**v["prior_assoc"]),
                prior_sre_ind=GaussianPrior(**v["prior_sre_ind"]),
                prior_rw=LogGammaPrior(**v["prior_rw"]),
                prior_residual=LogGammaPrior(**v["prior_residual"]),
                prior_weibull_shape=GaussianPrior(**v["prior_weibull_shape"]),
                assoc_init=float(v["assoc_init"]),
                int_strategy=IntStrategy(v["int_strategy"]),
                tolerance=float(v["tolerance"]),
                h_step=float(v["h_step"]),
                seed=int(v["seed"]),
                cs_delta_scale=float(v["cs_delta_scale"]),
                grid_dz=float(v["grid_dz"]),
                grid_log_drop=float(v["grid_log_drop"]),
                max_inner_iter=int(v["max_inner_iter"]),
                max_outer_iter=int(v["max_outer_iter"]),
                outer_gtol=float(v["outer_gtol"]),
                w_floor=float(v["w_floor"]),
                rw_jitter=float(v["rw_jitter"]),
                n_transform_samples=int(v["n_transform_samples"]),
                n_ic_samples=int(v["n_ic_samples"]),
                threads=threads,
            )
        except KeyError as e:
            raise ModelSpecError(f"Missing control value: {e.args[0]}")
        except (TypeError, ValueError) as e:
            raise ModelSpecError(f"Invalid control value: {e}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["int_strategy"] = self.int_strategy.value
        return data


def default_controls(overrides: Optional[Mapping[str, Any]] = None) -> ControlOptions:
    """Engine defaults merged with a (possibly partial) control document"""
    merged = config_loader.merged_controls(overrides)
    return ControlOptions.from_dict(merged)


# ==================== Submodels ====================

@dataclass(frozen=True)
class LongSpec:
    """One longitudinal submodel"""
    name: str
    response: str
    family: Family
    fixed_terms: Tuple[Term, ...] = (Term(),)
    random_terms: Tuple[Term, ...] = ()
    cor_re: bool = True
    ntrials: int = 1

    def __post_init__(self):
        if self.family.kind not in LONGITUDINAL_FAMILIES:
            raise ModelSpecError(f"{self.name}: family {self.family.kind.value} is not a longitudinal family")
        if self.ntrials < 1:
            raise ModelSpecError(f"{self.name}: ntrials must be >= 1, got {self.ntrials}")
        if len(set(self.fixed_terms)) != len(self.fixed_terms):
            raise ModelSpecError(f"{self.name}: duplicated fixed term")

    @property
    def n_random(self) -> int:
        return len(self.random_terms)

    def to_config(self) -> Dict[str, Any]:
        return {
            "response": self.response,
            "family": self.family.kind.value,
            "link": self.family.link.value,
            "fixed": [t.to_config() for t in self.fixed_terms],
            "random": [t.to_config() for t in self.random_terms],
            "cor_re": self.cor_re,
            "ntrials": self.ntrials,
        }


@dataclass(frozen=True)
class SurvSpec:
    """One survival submodel; the first fixed term is always the intercept"""
    name: str
    exit_time: str
    event: str
    entry_time: Optional[str] = None
    fixed_terms: Tuple[Term, ...] = (Term(),)
    frailty: bool = False
    baseline: BaselineKind = BaselineKind.RW1
    variant: int = 0
    n_intervals: int = 15
    cutpoints: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "baseline", BaselineKind(self.baseline))
        if not self.fixed_terms or not self.fixed_terms[0].is_intercept:
            raise ModelSpecError(f"{self.name}: survival predictors start with the intercept")
        if self.n_intervals < 1:
            raise ModelSpecError(f"{self.name}: n_intervals must be >= 1")
        if self.variant not in (0, 1):
            raise ModelSpecError(f"{self.name}: Weibull variant must be 0 or 1")
        if self.cutpoints is not None and not ConfigValidator.validate_cutpoints(list(self.cutpoints)):
            raise ModelSpecError(f"{self.name}: cutpoints must be strictly increasing")

    def to_config(self) -> Dict[str, Any]:
        return {
            "entry_time": self.entry_time,
            "exit_time": self.exit_time,
            "event": self.event,
            "fixed": [t.to_config() for t in self.fixed_terms],
            "frailty": self.frailty,
            "baseline": self.baseline.value,
            "variant": self.variant,
            "n_intervals": self.n_intervals,
            "cutpoints": None if self.cutpoints is None else list(self.cutpoints),
        }


@dataclass(frozen=True)
class ModelSpec:
    """All submodels, their associations and controls, with the parsed data"""
    longitudinal: Tuple[LongSpec, ...]
    survival: Tuple[SurvSpec, ...]
    assoc: Tuple[Tuple[AssociationKind, ...], ...]
    cor_long: bool
    id_column: str
    time_column: str
    controls: ControlOptions
    time_knots: Tuple[float, ...] = ()
    long_data: pd.DataFrame = field(default=None, compare=False, repr=False)
    surv_data: pd.DataFrame = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.longitudinal and not self.survival:
            raise ModelSpecError("At least one submodel is required")
        if len(self.assoc) != len(self.longitudinal) or any(len(row) != len(self.survival) for row in self.assoc):
            raise ModelSpecError(
                f"assoc must be {len(self.longitudinal)} x {len(self.survival)} (longitudinal x survival)"
            )

    @property
    def max_time(self) -> float:
        """Largest observed time over longitudinal visits and survival exits"""
        times = [0.0]
        if self.longitudinal and self.long_data is not None and len(self.long_data):
            times.append(float(np.nanmax(self.long_data[self.time_column].to_numpy(dtype=float))))
        for surv in self.survival:
            if self.surv_data is not None and len(self.surv_data):
                times.append(float(np.nanmax(self.surv_data[surv.exit_time].to_numpy(dtype=float))))
        return max(times)

    def time_registry(self) -> TimeFunctionRegistry:
        return TimeFunctionRegistry.with_spline(self.time_column, self.time_knots, self.max_time)

    def cs_delta(self) -> float:
        """Central-difference step of current-slope rows"""
        return self.controls.cs_delta_scale * max(self.max_time, 1e-8)

    def subjects(self) -> np.ndarray:
        """Subject ids in first-appearance order (longitudinal data first)"""
        ids: List[Any] = []
        if self.longitudinal and self.long_data is not None:
            ids.extend(pd.unique(self.long_data[self.id_column]))
        if self.survival and self.surv_data is not None:
            ids.extend(pd.unique(self.surv_data[self.id_column]))
        return np.asarray(list(dict.fromkeys(ids)), dtype=object)

    def with_controls(self, **changes) -> "ModelSpec":
        return replace(self, controls=replace(self.controls, **changes))

    def to_config(self) -> Dict[str, Any]:
        """Model document with every default filled in"""
        return {
            "id_column": self.id_column,
            "time_column": self.time_column,
            "cor_long": self.cor_long,
            "time_basis": {"knots": list(self.time_knots)},
            "longitudinal": [m.to_config() for m in self.longitudinal],
            "survival": [s.to_config() for s in self.survival],
            "assoc": [[a.value for a in row] for row in self.assoc],
            "controls": self.controls.to_dict(),
        }


# ==================== Parsing ====================

def load_table(path: Union[str, Path]) -> pd.DataFrame:
    """Read a CSV table where '.' or an empty cell marks a missing value"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Data file not found: {path}")
    return pd.read_csv(path, na_values=MISSING_VALUES, keep_default_na=True)


def _parse_terms(values, where: str) -> Tuple[Term, ...]:
    terms = tuple(Term.parse(v) for v in values)
    if len(set(terms)) != len(terms):
        raise ModelSpecError(f"{where}: duplicated term")
    return terms


def _check_factor_columns(terms, data: pd.DataFrame, registry_names, time_column: str, where: str) -> None:
    for term in terms:
        for factor in term.factors:
            if factor == time_column or factor in registry_names:
                continue
            if data is None or factor not in data.columns:
                raise ModelSpecError(f"{where}: missing column '{factor}' used in term {term.label}")


def _survival_fallback(long_data: pd.DataFrame, id_column: str, time_column: str) -> pd.DataFrame:
    """One row per subject taken from its first longitudinal visit"""
    ordered = long_data.sort_values([id_column, time_column], kind="mergesort")
    return ordered.groupby(id_column, sort=False).head(1).reset_index(drop=True)


def parse_config(
    config_text: Union[str, Mapping[str, Any]],
    long_data: Optional[pd.DataFrame] = None,
    surv_data: Optional[pd.DataFrame] = None,
) -> ModelSpec:
    """
    Parse a JSON model document and its tables into a ModelSpec.

    Raises:
        ModelSpecError: malformed document, unknown family/link/baseline/association,
            missing column, malformed term or non-binary event column
    """
    if isinstance(config_text, str):
        try:
            doc = json.loads(config_text)
        except json.JSONDecodeError as e:
            raise ModelSpecError(f"Malformed model document: {e}")
    else:
        doc = dict(config_text)

    schema_errors = config_loader.schema_errors(doc, "model")
    if schema_errors:
        raise ModelSpecError(f"Model document does not match schema: {schema_errors[0]}", schema_errors)

    id_column = doc["id_column"]
    time_column = doc["time_column"]
    knots = tuple(float(k) for k in doc.get("time_basis", {}).get("knots", []))
    registry_names = set(TimeFunctionRegistry(time_column).names)
    registry_names.update(f"ns{j + 1}" for j in range(len(knots) + 1) if knots)
    controls = default_controls(doc.get("controls"))

    long_docs = doc.get("longitudinal", [])
    surv_docs = doc.get("survival", [])
    if long_docs and long_data is None:
        raise ModelSpecError("Longitudinal submodels need a longitudinal table")

    longitudinal = []
    for k, m in enumerate(long_docs, start=1):
        name = f"L{k}"
        family = Family(FamilyKind(m["family"]) if m["family"] in {f.value for f in FamilyKind} else m["family"],
                        m.get("link"))
        fixed = _parse_terms(m.get("fixed", ["1"]), name)
        random = _parse_terms(m.get("random", []), name)
        for column in (id_column, time_column, m["response"]):
            if column not in long_data.columns:
                raise ModelSpecError(f"{name}: missing column '{column}'")
        _check_factor_columns(fixed + random, long_data, registry_names, time_column, name)
        longitudinal.append(LongSpec(
            name=name, response=m["response"], family=family, fixed_terms=fixed, random_terms=random,
            cor_re=bool(m.get("cor_re", True)), ntrials=int(m.get("ntrials", 1)),
        ))

    if surv_docs and surv_data is None:
        if long_data is None:
            raise ModelSpecError("Survival submodels need a survival or longitudinal table")
        surv_data = _survival_fallback(long_data, id_column, time_column)
        logger.info(f"No survival table supplied; using first longitudinal row of {len(surv_data)} subjects")

    survival = []
    for j, s in enumerate(surv_docs, start=1):
        name = f"S{j}"
        baseline = s.get("baseline", "rw1")
        if not ConfigValidator.validate_baseline(baseline):
            raise ModelSpecError(f"{name}: unknown baseline '{baseline}'")
        fixed = _parse_terms(s.get("fixed", []), name)
        fixed = (Term(),) + tuple(t for t in fixed if not t.is_intercept)
        for column in [id_column, s["exit_time"], s["event"]] + ([s["entry_time"]] if s.get("entry_time") else []):
            if column not in surv_data.columns:
                raise ModelSpecError(f"{name}: missing column '{column}'")
        _check_factor_columns(fixed, surv_data, set(), "", name)
        events = surv_data[s["event"]].dropna().unique()
        if not set(np.asarray(events, dtype=float).tolist()) <= {0.0, 1.0}:
            raise ModelSpecError(f"{name}: non-binary event column '{s['event']}'")
        cutpoints = s.get("cutpoints")
        survival.append(SurvSpec(
            name=name, exit_time=s["exit_time"], event=s["event"], entry_time=s.get("entry_time"),
            fixed_terms=fixed, frailty=bool(s.get("frailty", False)), baseline=BaselineKind(baseline),
            variant=int(s.get("variant", 0)), n_intervals=int(s.get("n_intervals", 15)),
            cutpoints=None if cutpoints is None else tuple(float(c) for c in cutpoints),
        ))

    assoc_doc = doc.get("assoc")
    if assoc_doc is None:
        assoc_doc = [[None] * len(survival) for _ in longitudinal]
    assoc = tuple(tuple(AssociationKind.parse(a) for a in row) for row in assoc_doc)
    for k, row in enumerate(assoc):
        for kind in row:
            if kind.needs_random and k < len(longitudinal) and not longitudinal[k].random_terms:
                raise ModelSpecError(f"{kind.value} association needs random effects in {longitudinal[k].name}")

    spec = ModelSpec(
        longitudinal=tuple(longitudinal), survival=tuple(survival), assoc=assoc,
        cor_long=bool(doc.get("cor_long", False)), id_column=id_column, time_column=time_column,
        controls=controls, time_knots=knots,
        long_data=None if not longitudinal else long_data.reset_index(drop=True),
        surv_data=None if not survival else surv_data.reset_index(drop=True),
    )
    logger.info(f"Parsed model: {len(longitudinal)} longitudinal, {len(survival)} survival submodels")
    return spec


# ==================== Data validation ====================

@dataclass
class ValidationReport:
    """Outcome of validate_data"""
    likelihood_free_rows: List[Tuple[str, int]] = field(default_factory=list)
    zero_observation_subjects: List[Any] = field(default_factory=list)
    n_subjects: int = 0
    n_long_rows: int = 0
    n_surv_rows: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "likelihood_free_rows": [{"outcome": o, "row": r} for o, r in self.likelihood_free_rows],
            "zero_observation_subjects": [str(s) for s in self.zero_observation_subjects],
            "n_subjects": self.n_subjects,
            "n_long_rows": self.n_long_rows,
            "n_surv_rows": self.n_surv_rows,
        }


def _missing_cells(data: pd.DataFrame, columns: Sequence[str], where: str) -> None:
    for column in columns:
        missing = data[column].isna().to_numpy()
        if missing.any():
            row = int(np.flatnonzero(missing)[0])
            raise DataValidationError(
                f"{where}: missing covariate value in row {row}, column '{column}'",
                [f"row {int(r)}, column '{column}'" for r in np.flatnonzero(missing)],
            )


def _factor_columns(terms, time_column: str, registry_names) -> List[str]:
    columns = []
    for term in terms:
        for factor in term.factors:
            if factor != time_column and factor not in registry_names and factor not in columns:
                columns.append(factor)
    return columns


def validate_data(spec: ModelSpec) -> ValidationReport:
    """
    Check the tables against the model.

    Missing responses are allowed and reported; missing covariates, empty
    tables and survival-only subjects in a joint model are errors.
    """
    report = ValidationReport()
    registry_names = set(spec.time_registry().names)
    long_data = spec.long_data
    surv_data = spec.surv_data

    if spec.longitudinal and (long_data is None or len(long_data) == 0):
        raise DataValidationError("no observations")
    if spec.survival and (surv_data is None or len(surv_data) == 0):
        raise DataValidationError("no observations")

    if spec.longitudinal:
        report.n_long_rows = len(long_data)
        used = [spec.id_column, spec.time_column]
        for m in spec.longitudinal:
            used += [c for c in _factor_columns(m.fixed_terms + m.random_terms, spec.time_column, registry_names)
                     if c not in used]
        _missing_cells(long_data, used, "longitudinal data")
        if (long_data[spec.time_column].to_numpy(dtype=float) < 0).any():
            raise DataValidationError("longitudinal data: negative visit time")
        observed_any = np.zeros(len(long_data), dtype=bool)
        for m in spec.longitudinal:
            missing = long_data[m.response].isna().to_numpy()
            observed_any |= ~missing
            report.likelihood_free_rows.extend((m.name, int(r)) for r in np.flatnonzero(missing))
        per_subject = pd.Series(observed_any).groupby(long_data[spec.id_column].to_numpy()).any()
        report.zero_observation_subjects = [s for s, ok in per_subject.items() if not ok]

    if spec.survival:
        report.n_surv_rows = len(surv_data)
        if surv_data[spec.id_column].duplicated().any():
            dup = surv_data[spec.id_column][surv_data[spec.id_column].duplicated()].iloc[0]
            raise DataValidationError(f"survival data: subject {dup} appears more than once")
        for s in spec.survival:
            used = [spec.id_column, s.exit_time, s.event] + ([s.entry_time] if s.entry_time else [])
            used += _factor_columns(s.fixed_terms, "", set())
            _missing_cells(surv_data, used, s.name)
            entry = surv_data[s.entry_time].to_numpy(dtype=float) if s.entry_time else np.zeros(len(surv_data))
            exit = surv_data[s.exit_time].to_numpy(dtype=float)
            bad = np.flatnonzero((exit <= entry) | (entry < 0))
            if bad.size:
                raise DataValidationError(
                    f"{s.name}: exit must exceed entry >= 0 (row {int(bad[0])})",
                    [f"row {int(r)}" for r in bad],
                )
        if spec.longitudinal:
            known = set(pd.unique(long_data[spec.id_column]))
            orphans = [i for i in pd.unique(surv_data[spec.id_column]) if i not in known]
            if orphans:
                raise DataValidationError(
                    f"survival data: subject {orphans[0]} has no longitudinal rows",
                    [f"subject {o}" for o in orphans],
                )

    report.n_subjects = len(spec.subjects())
    if report.likelihood_free_rows:
        logger.info(f"{len(report.likelihood_free_rows)} likelihood-free rows (missing responses)")
    return report

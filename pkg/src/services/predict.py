"""
Posterior prediction for new or fitted subjects.

Each posterior draw of (fixed effects, baseline, omega) conditions the
subject's random effects on that subject's observed longitudinal rows with a
subject-level Laplace approximation, draws random-effect realisations and
evaluates trajectories, hazards, survival and cumulative incidence curves.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.integrate import cumulative_trapezoid

from config.config import config_loader
from src.services.assembly import group_precision
from src.services.design import build_rows, term_derivatives, term_values
from src.services.errors import PredictionError
from src.services.inference import FitResult, gaussian_approx, sample_posterior
from src.services.likelihoods import AugmentedDataset, FamilyKind, ObservationBlock
from src.services.model_spec import BaselineKind

logger = logging.getLogger(__name__)

STAT_NAMES = ["Mean", "Sd", "quant0.025", "quant0.5", "quant0.975"]
PROBS = (0.025, 0.5, 0.975)
MIN_TIME = 1e-8


@dataclass
class PredictRequest:
    """What to predict and on which grid"""
    new_data: pd.DataFrame
    horizon: float
    time_points: Optional[Sequence[float]] = None
    n_time_points: Optional[int] = None
    n_sample: Optional[int] = None
    n_sample_re: Optional[int] = None
    inv_link: bool = False
    survival: bool = True
    cif: bool = False
    csurv: Optional[float] = None
    return_samples: bool = False
    surv_data: Optional[pd.DataFrame] = None
    seed: int = 0

    def __post_init__(self):
        defaults = config_loader.predict_defaults()
        self.n_time_points = self.n_time_points or defaults["n_time_points"]
        self.n_sample = self.n_sample or defaults["n_sample"]
        self.n_sample_re = self.n_sample_re or defaults["n_sample_re"]
        if not self.horizon > 0:
            raise PredictionError(f"horizon must be positive, got {self.horizon}")
        if min(self.n_time_points, self.n_sample, self.n_sample_re) < 1:
            raise PredictionError("Sample counts and time points must be >= 1")

    def grid(self) -> np.ndarray:
        if self.time_points is not None:
            return np.sort(np.asarray(self.time_points, dtype=float))
        return np.linspace(0.0, float(self.horizon), int(self.n_time_points))


@dataclass
class PredictResult:
    longitudinal: pd.DataFrame
    survival: pd.DataFrame
    samples: Optional[pd.DataFrame] = None
    csurv: Dict[object, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            "longitudinal": self.longitudinal.to_dict(orient="records"),
            "survival": self.survival.to_dict(orient="records"),
        }


def _summ(draws: np.ndarray) -> np.ndarray:
    """(n_draws, n_t) -> (n_t, 5) statistics"""
    q = np.quantile(draws, PROBS, axis=0)
    sd = draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1])
    return np.column_stack([draws.mean(axis=0), sd, q[0], q[1], q[2]])


class SubjectPredictor:
    """Random-effect conditioning and curve evaluation for one subject"""

    def __init__(self, fit: FitResult, rows: pd.DataFrame, surv_row: Optional[pd.Series]):
        self.fit = fit
        self.model = fit.model
        self.spec = fit.model.spec
        self.registry = fit.model.registry
        self.layout = fit.model.layout
        self.groups = [g for g in self.layout.groups if not g.name.startswith("frailty_")]
        offsets, cursor = {}, 0
        for g in self.groups:
            offsets[g.name] = cursor
            cursor += g.dim
        self.q = cursor
        self.local = {}
        for m in self.spec.longitudinal:
            if m.random_terms:
                group, offset = self.layout.group_of(m.name)
                self.local[m.name] = offsets[group.name] + offset + np.arange(m.n_random)

        first = rows.iloc[[0]]
        self.covariates = {c: first[c].to_numpy() for c in rows.columns}
        self._check_covariates(first)
        self.surv_covariates = self.covariates if surv_row is None else \
            {c: np.atleast_1d(surv_row[c]) for c in surv_row.index}
        self._build_observations(rows)

    def _check_covariates(self, first: pd.DataFrame) -> None:
        for m in self.spec.longitudinal:
            for term in m.fixed_terms + m.random_terms:
                for factor in term.factors:
                    if self.registry.is_time_factor(factor):
                        continue
                    if factor not in first.columns or pd.isna(first[factor].iloc[0]):
                        raise PredictionError(f"Missing covariate '{factor}' for subject {first.iloc[0].get(self.spec.id_column)}")

    def _build_observations(self, rows: pd.DataFrame) -> None:
        """Observed longitudinal rows of markers with random effects"""
        blocks, z_parts, x_parts, cursor = [], [], [], 0
        times = rows[self.spec.time_column].to_numpy(dtype=float)
        cov = {c: rows[c].to_numpy() for c in rows.columns}
        for m in self.spec.longitudinal:
            if m.name not in self.local or m.response not in rows.columns:
                continue
            y = rows[m.response].to_numpy(dtype=float)
            keep = ~np.isnan(y)
            if not keep.any():
                continue
            sub_cov = {c: v[keep] for c, v in cov.items()}
            X = term_values(m.fixed_terms, sub_cov, times[keep], self.registry)
            Z = term_values(m.random_terms, sub_cov, times[keep], self.registry)
            n = int(keep.sum())
            zfull = np.zeros((n, self.q))
            zfull[:, self.local[m.name]] = Z
            z_parts.append(zfull)
            x_parts.append((m.name, X))
            blocks.append(ObservationBlock(
                outcome=m.name, family=m.family, rows=slice(cursor, cursor + n), y=y[keep],
                ntrials=np.full(n, m.ntrials, dtype=float) if m.family.kind == FamilyKind.BINOMIAL else None,
                hyper_index=self.model.hyper.residual.get(m.name),
            ))
            cursor += n
        self.dataset = AugmentedDataset(blocks)
        self.A = sparse.csr_matrix(np.vstack(z_parts)) if z_parts else sparse.csr_matrix((0, self.q))
        self.fixed_parts = x_parts
        observed = np.zeros(len(rows), dtype=bool)
        for m in self.spec.longitudinal:
            if m.response in rows.columns:
                observed |= rows[m.response].notna().to_numpy()
        self.last_time = float(times[observed].max()) if observed.any() else 0.0

    def re_draws(self, omega: np.ndarray, latent: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray:
        """(q, n) random-effect draws conditional on the observed rows"""
        if self.q == 0:
            return np.zeros((0, n))
        offset = np.concatenate([X @ latent[self.layout.fixed_slice(name)] for name, X in self.fixed_parts]) \
            if self.fixed_parts else np.zeros(0)
        Q = sparse.block_diag([group_precision(self.layout, omega, g) for g in self.groups], format="csc")
        controls = self.model.controls
        approx = gaussian_approx(
            self.A, Q, self.dataset, omega, tolerance=controls.tolerance, max_iter=controls.max_inner_iter,
            w_floor=controls.w_floor, eta_offset=offset,
        )
        return approx.sample(rng, n)

    def eta(self, name: str, times: np.ndarray, latent: np.ndarray, b: np.ndarray, derivative: bool = False,
            part: str = "full") -> np.ndarray:
        """(n_draws_re, n_t) linear predictor of marker `name`"""
        m = next(x for x in self.spec.longitudinal if x.name == name)
        if derivative:
            delta = self.spec.cs_delta()
            X = term_derivatives(m.fixed_terms, self.covariates, times, self.registry, delta)
            Z = term_derivatives(m.random_terms, self.covariates, times, self.registry, delta) if m.random_terms else None
        else:
            X = term_values(m.fixed_terms, self.covariates, times, self.registry)
            Z = term_values(m.random_terms, self.covariates, times, self.registry) if m.random_terms else None
        out = np.zeros((b.shape[1], times.size))
        if part == "full":
            out += (X @ latent[self.layout.fixed_slice(name)])[None, :]
        if Z is not None:
            out += (Z @ b[self.local[name]]).T
        return out

    def log_hazard(self, s, times: np.ndarray, omega: np.ndarray, latent: np.ndarray, b: np.ndarray,
                   frailty: np.ndarray) -> np.ndarray:
        """(n_draws_re, n_t) log hazard of survival submodel s"""
        hyper = self.model.hyper
        x = term_values(s.fixed_terms, self.surv_covariates, np.zeros(1), self.registry)[0]
        eta = np.full((b.shape[1], times.size), float(x @ latent[self.layout.fixed_slice(s.name)]))
        for term in hyper.assoc:
            if term.surv_outcome != s.name:
                continue
            phi = float(omega[term.index])
            if term.kind == "CV":
                eta += phi * self.eta(term.long_outcome, times, latent, b)
            elif term.kind == "CS":
                eta += phi * self.eta(term.long_outcome, times, latent, b, derivative=True)
            elif term.kind == "SRE":
                eta += phi * self.eta(term.long_outcome, times, latent, b, part="random")
            else:
                eta += phi * b[self.local[term.long_outcome][term.random_index]][:, None]
        eta += frailty[:, None]
        t = np.maximum(times, MIN_TIME)
        if s.baseline.is_rw:
            sl = self.layout.baseline_slice(s.name)
            log_h0 = np.interp(times, self.model.cutpoints[s.name].midpoints, latent[sl])
            return eta + log_h0[None, :]
        if s.baseline == BaselineKind.WEIBULL:
            shape = float(np.exp(omega[hyper.weibull[s.name]]))
            if s.variant == 1:
                return np.log(shape) + shape * eta + (shape - 1.0) * np.log(t)[None, :]
            return np.log(shape) + (shape - 1.0) * np.log(t)[None, :] + eta
        return eta


def _latent_indices(fit: FitResult) -> np.ndarray:
    layout = fit.model.layout
    idx = list(range(layout.n_fixed))
    for sl in layout.baselines.values():
        idx.extend(range(sl.start, sl.stop))
    return np.asarray(idx, dtype=int)


def predict(fit: FitResult, request: PredictRequest) -> PredictResult:
    """
    Trajectories and survival curves for every subject in request.new_data.

    Raises:
        PredictionError: missing covariates or a horizon not beyond the last observation
    """
    model = fit.model
    spec = model.spec
    id_column, time_column = spec.id_column, spec.time_column
    data = request.new_data
    for column in (id_column, time_column):
        if column not in data.columns:
            raise PredictionError(f"New data lacks column '{column}'")
    times = request.grid()
    if times.size and times.max() > request.horizon:
        raise PredictionError("Requested time points beyond the horizon")

    seeds = np.random.SeedSequence(request.seed).spawn(3)
    rng_post, rng_re, rng_frailty = (np.random.default_rng(s) for s in seeds)
    indices = _latent_indices(fit)
    omega_draws, picked = sample_posterior(fit.points, request.n_sample, indices=indices, rng=rng_post)
    latent_draws = np.zeros((request.n_sample, model.n_latent))
    latent_draws[:, indices] = picked
    n_re = request.n_sample_re

    long_frames, surv_frames, sample_frames = [], [], []
    csurv_used = {}
    for subject in pd.unique(data[id_column]):
        rows = data[data[id_column] == subject].sort_values(time_column, kind="mergesort")
        surv_row = None
        if request.surv_data is not None:
            match = request.surv_data[request.surv_data[id_column] == subject]
            surv_row = match.iloc[0] if len(match) else None
        subject_model = SubjectPredictor(fit, rows, surv_row)
        if request.horizon <= subject_model.last_time:
            raise PredictionError(
                f"horizon {request.horizon} is not beyond the last observation {subject_model.last_time} of subject {subject}"
            )
        csurv = subject_model.last_time if request.csurv is None else float(request.csurv)
        if csurv >= request.horizon:
            raise PredictionError(f"Csurv {csurv} must be below the horizon {request.horizon}")
        csurv_used[subject] = csurv
        tsurv = np.concatenate([[csurv], times[times > csurv]])

        eta_draws = {m.name: [] for m in spec.longitudinal}
        haz_draws = {s.name: [] for s in spec.survival}
        for k in range(request.n_sample):
            omega, latent = omega_draws[k], latent_draws[k]
            b = subject_model.re_draws(omega, latent, rng_re, n_re)
            if b.shape[0] == 0:
                b = np.zeros((0, n_re))
            for m in spec.longitudinal:
                eta = subject_model.eta(m.name, times, latent, b)
                eta_draws[m.name].append(m.family.inverse_link(eta) if request.inv_link else eta)
            if request.survival:
                for s in spec.survival:
                    frailty = np.zeros(n_re)
                    group_name = f"frailty_{s.name}"
                    if group_name in model.hyper.re_groups:
                        sd = float(np.exp(-omega[model.hyper.re_groups[group_name]][0]))
                        frailty = rng_frailty.normal(0.0, sd, n_re)
                    haz_draws[s.name].append(np.exp(subject_model.log_hazard(s, tsurv, omega, latent, b, frailty)))

        for m in spec.longitudinal:
            draws = np.vstack(eta_draws[m.name])
            frame = pd.DataFrame(_summ(draws), columns=STAT_NAMES)
            frame.insert(0, "Outcome", m.name)
            frame.insert(0, time_column, times)
            frame.insert(0, id_column, subject)
            long_frames.append(frame)
            if request.return_samples:
                sample_frames.append(_sample_frame(subject, m.name, "eta", times, draws, id_column, time_column))

        if request.survival and spec.survival:
            hazards = {name: np.vstack(v) for name, v in haz_draws.items()}
            cumulative = {name: cumulative_trapezoid(h, tsurv, axis=1, initial=0.0) for name, h in hazards.items()}
            total = sum(cumulative.values())
            surv = np.exp(-total)
            increments = np.diff(total, axis=1)
            for s in spec.survival:
                frame = pd.DataFrame(_summ(hazards[s.name]), columns=[f"Haz_{c}" for c in STAT_NAMES])
                for c, col in zip(STAT_NAMES, _summ(surv).T):
                    frame[f"Surv_{c}"] = col
                if request.cif:
                    step_j = np.diff(cumulative[s.name], axis=1)
                    share = np.divide(step_j, increments, out=np.zeros_like(step_j), where=increments > 0)
                    cif_steps = surv[:, :-1] * (1.0 - np.exp(-increments)) * share
                    cif = np.concatenate([np.zeros((surv.shape[0], 1)), np.cumsum(cif_steps, axis=1)], axis=1)
                    for c, col in zip(STAT_NAMES, _summ(cif).T):
                        frame[f"CIF_{c}"] = col
                    if request.return_samples:
                        sample_frames.append(_sample_frame(subject, s.name, "CIF", tsurv, cif, id_column, time_column))
                frame.insert(0, "Outcome", s.name)
                frame.insert(0, time_column, tsurv)
                frame.insert(0, id_column, subject)
                surv_frames.append(frame)
                if request.return_samples:
                    sample_frames.append(_sample_frame(subject, s.name, "Haz", tsurv, hazards[s.name], id_column, time_column))
                    sample_frames.append(_sample_frame(subject, s.name, "Surv", tsurv, surv, id_column, time_column))

    logger.info(f"Predicted {data[id_column].nunique()} subjects on {times.size} time points")
    return PredictResult(
        longitudinal=pd.concat(long_frames, ignore_index=True) if long_frames else pd.DataFrame(),
        survival=pd.concat(surv_frames, ignore_index=True) if surv_frames else pd.DataFrame(),
        samples=pd.concat(sample_frames, ignore_index=True) if sample_frames else None,
        csurv=csurv_used,
    )


def _sample_frame(subject, outcome: str, quantity: str, times: np.ndarray, draws: np.ndarray,
                  id_column: str, time_column: str) -> pd.DataFrame:
    n_draws, n_t = draws.shape
    return pd.DataFrame({
        id_column: subject,
        time_column: np.tile(times, n_draws),
        "Outcome": outcome,
        "quantity": quantity,
        "sample": np.repeat(np.arange(n_draws), n_t),
        "value": draws.ravel(),
    })


def impute_missing(fit: FitResult, rows: Optional[pd.DataFrame] = None, inv_link: bool = False,
                   n_samples: Optional[int] = None) -> pd.DataFrame:
    """Fill missing responses of fitted subjects with the posterior mean predictor"""
    model = fit.model
    spec = model.spec
    data = (spec.long_data if rows is None else rows).copy()
    n = n_samples or model.controls.n_ic_samples
    rng = np.random.default_rng(model.controls.seed)
    draws = None
    for m in spec.longitudinal:
        missing = data[m.response].isna().to_numpy()
        if not missing.any():
            continue
        block = build_rows(m, data.loc[missing], model.layout, model.registry, m.name)
        if inv_link and m.family.kind != FamilyKind.GAUSSIAN:
            if draws is None:
                _, draws = sample_posterior(fit.points, n, rng=rng)
            values = m.family.inverse_link(block.matrix @ draws.T).mean(axis=1)
        else:
            values = block.matrix @ fit.marginals.mean()
            if inv_link:
                values = m.family.inverse_link(values)
        data.loc[missing, m.response] = values
    return data

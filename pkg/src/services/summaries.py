"""
Posterior summaries of a fitted joint model.

Fixed effects come from the latent mixture marginals; every nonlinear scale
change (variances, sd/correlation, Weibull shape, hazard ratios of sampled
quantities) is done by transforming posterior samples.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.stats import gaussian_kde, norm
from tabulate import tabulate

from src.services.assembly import cholesky_factor
from src.services.inference import FitResult, PosteriorMarginal, sample_posterior
from src.services.model_spec import BaselineKind

logger = logging.getLogger(__name__)

COLUMNS = ["mean", "sd", "0.025quant", "0.5quant", "0.975quant"]
PROBS = (0.025, 0.5, 0.975)
ASSOC_TITLE = "Association longitudinal - survival"


@dataclass
class FitSummary:
    """Section tables plus model-comparison criteria"""
    tables: Dict[str, pd.DataFrame]
    mlik_integration: float
    mlik_gaussian: float
    dic: float
    p_dic: float
    waic: float
    p_waic: float
    seconds: float
    sdcor: bool = False
    hr: bool = False
    priors_used: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """JSON document; wall-clock time is left to the run manifest"""
        return {
            "sections": {
                title: {row: {c: float(table.loc[row, c]) for c in COLUMNS} for row in table.index}
                for title, table in self.tables.items()
            },
            "mlik": {"integration": self.mlik_integration, "gaussian": self.mlik_gaussian},
            "dic": self.dic,
            "p_dic": self.p_dic,
            "waic": self.waic,
            "p_waic": self.p_waic,
            "sdcor": self.sdcor,
            "hr": self.hr,
            "priors_used": self.priors_used,
        }

    def to_text(self) -> str:
        blocks = []
        for title, table in self.tables.items():
            headers = ["exp(" + c + ")" if self.hr and title.startswith("Survival") and c == "mean" else c
                       for c in COLUMNS]
            blocks.append(title)
            blocks.append(tabulate(table[COLUMNS], headers=headers, floatfmt=".4f", tablefmt="plain"))
            blocks.append("")
        blocks.append(f"log marginal-likelihood (integration)   {self.mlik_integration:.4f}")
        blocks.append(f"log marginal-likelihood (Gaussian)      {self.mlik_gaussian:.4f}")
        blocks.append(f"Deviance Information Criterion:  {self.dic:.4f}")
        blocks.append(f"Widely applicable Bayesian information criterion:  {self.waic:.4f}")
        blocks.append(f"Computation time: {self.seconds:.2f} seconds")
        return "\n".join(blocks) + "\n"

    def row(self, name: str) -> pd.Series:
        """Look a parameter up across sections"""
        for table in self.tables.values():
            if name in table.index:
                return table.loc[name]
        raise KeyError(name)


def _stats(samples: np.ndarray) -> List[float]:
    return [float(np.mean(samples)), float(np.std(samples, ddof=1))] + [float(q) for q in np.quantile(samples, PROBS)]


def _marginal_stats(marginal: PosteriorMarginal) -> List[float]:
    return [marginal.mean(), marginal.sd()] + marginal.quantiles(PROBS)


def _exp_stats(marginal: PosteriorMarginal) -> List[float]:
    """exp of a Gaussian mixture: lognormal moments, quantiles mapped monotonically"""
    w, mu, s2 = marginal.weights, marginal.means, marginal.sds ** 2
    mean = float(np.dot(w, np.exp(mu + 0.5 * s2)))
    second = float(np.dot(w, np.exp(2.0 * mu + 2.0 * s2)))
    return [mean, float(np.sqrt(max(second - mean ** 2, 0.0)))] + [float(np.exp(q)) for q in marginal.quantiles(PROBS)]


def _table(rows: List[Tuple[str, List[float]]]) -> pd.DataFrame:
    return pd.DataFrame([v for _, v in rows], index=[n for n, _ in rows], columns=COLUMNS)


def hyper_samples(fit: FitResult, n: Optional[int] = None, seed: Optional[int] = None) -> np.ndarray:
    """Seeded omega draws from the hyperparameter posterior"""
    controls = fit.model.controls
    rng = np.random.default_rng(controls.seed if seed is None else seed)
    return fit.hyper_posterior.sample(rng, n or controls.n_transform_samples)


def random_effect_rows(fit: FitResult, omega_samples: np.ndarray, sdcor: bool) -> List[Tuple[str, List[float]]]:
    """Covariance (or sd/correlation) rows of every longitudinal RE group"""
    model = fit.model
    rows = []
    for group in model.layout.groups:
        if group.name.startswith("frailty_"):
            continue
        theta = omega_samples[:, model.hyper.re_groups[group.name]]
        d = group.dim
        covs = np.empty((theta.shape[0], d, d))
        for s in range(theta.shape[0]):
            L = cholesky_factor(theta[s], d, group.correlated)
            covs[s] = np.linalg.inv(L @ L.T)
        sds = np.sqrt(np.einsum("sii->si", covs))
        for i, label in enumerate(group.labels):
            rows.append((label, _stats(sds[:, i] if sdcor else covs[:, i, i])))
        if group.correlated:
            for i, j in zip(*np.tril_indices(d, -1)):
                values = covs[:, i, j] / (sds[:, i] * sds[:, j]) if sdcor else covs[:, i, j]
                rows.append((f"{group.labels[i]}:{group.labels[j]}", _stats(values)))
    return rows


def information_criteria(fit: FitResult, n_samples: Optional[int] = None, seed: Optional[int] = None) -> Dict[str, float]:
    """
    DIC and WAIC from joint posterior draws, accumulated one draw at a time.

    Deviance is -2 sum loglik over observation units; augmented survival rows
    of one subject form a single unit.
    """
    model = fit.model
    controls = model.controls
    n = n_samples or controls.n_ic_samples
    rng = np.random.default_rng(controls.seed if seed is None else seed)
    omega_draws, u_draws = sample_posterior(fit.points, n, rng=rng)
    observed = model.dataset.observed_mask()
    _, units = np.unique(model.dataset.observation_units()[observed], return_inverse=True)
    n_units = int(units.max()) + 1 if units.size else 0

    def unit_loglik(u, omega):
        value, _, _ = model.dataset.row_loglik(model.eta(u, omega), omega)
        return np.bincount(units, weights=value[observed], minlength=n_units)

    deviance_sum = 0.0
    lse = np.full(n_units, -np.inf)
    mean = np.zeros(n_units)
    m2 = np.zeros(n_units)
    for s in range(n):
        ll = unit_loglik(u_draws[s], omega_draws[s])
        deviance_sum += -2.0 * ll.sum()
        lse = np.logaddexp(lse, ll)
        delta = ll - mean
        mean += delta / (s + 1)
        m2 += delta * (ll - mean)
    mean_deviance = deviance_sum / n
    plug_in = -2.0 * unit_loglik(fit.marginals.mean(), fit.hyper_grid_mean()).sum()
    p_dic = mean_deviance - plug_in
    lppd = float(np.sum(lse - np.log(n)))
    p_waic = float(np.sum(m2 / max(n - 1, 1)))
    return {
        "dic": float(mean_deviance + p_dic), "p_dic": float(p_dic),
        "waic": float(-2.0 * (lppd - p_waic)), "p_waic": p_waic,
    }


def dic(fit: FitResult) -> float:
    return information_criteria(fit)["dic"]


def waic(fit: FitResult) -> float:
    return information_criteria(fit)["waic"]


def summarize(fit: FitResult, sdcor: bool = False, hr: bool = False) -> FitSummary:
    """Per-outcome tables with transforms, marginal likelihoods, DIC and WAIC"""
    model = fit.model
    spec = model.spec
    hyper = model.hyper
    omega = hyper_samples(fit)
    tables: Dict[str, pd.DataFrame] = {}

    for m in spec.longitudinal:
        rows = []
        sl = model.layout.fixed_slice(m.name)
        for k, label in enumerate(model.layout.fixed_labels(m.name)):
            rows.append((label, _marginal_stats(fit.marginals.marginal(sl.start + k))))
        if m.name in hyper.residual:
            theta = omega[:, hyper.residual[m.name]]
            name = "Res. err. (sd)" if sdcor else "Res. err. (variance)"
            rows.append((f"{name}_{m.name}", _stats(np.exp(-0.5 * theta) if sdcor else np.exp(-theta))))
        tables[f"Longitudinal outcome ({m.name}, {m.family.kind.value})"] = _table(rows)

    re_rows = random_effect_rows(fit, omega, sdcor)
    if re_rows:
        title = "Random effects standard deviation / correlation" if sdcor else "Random effects variance-covariance"
        tables[title] = _table(re_rows)

    for s in spec.survival:
        rows = []
        sl = model.layout.fixed_slice(s.name)
        for k, term in enumerate(s.fixed_terms):
            marginal = fit.marginals.marginal(sl.start + k)
            label = f"{term.label}_{s.name}"
            if s.baseline == BaselineKind.WEIBULL and term.is_intercept:
                rows.append((f"Weibull (scale)_{s.name}", _exp_stats(marginal)))
                continue
            rows.append((label, _exp_stats(marginal) if hr else _marginal_stats(marginal)))
        if s.name in hyper.weibull:
            rows.append((f"Weibull (shape)_{s.name}", _stats(np.exp(omega[:, hyper.weibull[s.name]]))))
        if s.name in hyper.rw:
            theta = omega[:, hyper.rw[s.name]]
            rows.append((f"Baseline risk (variance)_{s.name}", _stats(np.exp(-theta))))
        frailty = f"frailty_{s.name}"
        if frailty in hyper.re_groups:
            theta = omega[:, hyper.re_groups[frailty]][:, 0]
            rows.append((f"Frailty (sd)_{s.name}" if sdcor else f"Frailty (variance)_{s.name}",
                         _stats(np.exp(-theta) if sdcor else np.exp(-2.0 * theta))))
        tables[f"Survival outcome ({s.name}, {s.baseline.value})"] = _table(rows)

    if hyper.assoc:
        tables[ASSOC_TITLE] = _table([(t.name, _stats(omega[:, t.index])) for t in hyper.assoc])

    criteria = information_criteria(fit)
    summary = FitSummary(
        tables=tables, mlik_integration=fit.mlik_integration, mlik_gaussian=fit.mlik_gaussian,
        dic=criteria["dic"], p_dic=criteria["p_dic"], waic=criteria["waic"], p_waic=criteria["p_waic"],
        seconds=fit.seconds, sdcor=sdcor, hr=hr, priors_used=model.priors.describe(),
    )
    logger.info(f"Summarized fit: DIC {summary.dic:.2f}, WAIC {summary.waic:.2f}")
    return summary


# ==================== Exports ====================

def posterior_densities(fit: FitResult, priors: bool = True, n_points: int = 201) -> Dict[str, Dict[str, List[float]]]:
    """Density grids of fixed effects, associations and transformed hyperparameters"""
    model = fit.model
    out: Dict[str, Dict[str, List[float]]] = {}
    prior_fixed = model.priors.fixed
    for outcome, sl in model.layout.fixed.items():
        for k, term in enumerate(model.layout.fixed_terms[outcome]):
            x, density = fit.marginals.marginal(sl.start + k).density_grid(n_points)
            entry = {"x": x.tolist(), "density": density.tolist()}
            if priors:
                mean, prec = ((prior_fixed.mean_intercept, prior_fixed.prec_intercept) if term.is_intercept
                              else (prior_fixed.mean, prior_fixed.prec))
                entry["prior"] = norm.pdf(x, mean, 1.0 / np.sqrt(prec)).tolist()
            out[f"{term.label}_{outcome}"] = entry

    omega = hyper_samples(fit)
    transforms = {}
    for outcome, idx in model.hyper.residual.items():
        transforms[f"Res. err. (variance)_{outcome}"] = np.exp(-omega[:, idx])
    for outcome, idx in model.hyper.weibull.items():
        transforms[f"Weibull (shape)_{outcome}"] = np.exp(omega[:, idx])
    for outcome, idx in model.hyper.rw.items():
        transforms[f"Baseline risk (variance)_{outcome}"] = np.exp(-omega[:, idx])
    for term in model.hyper.assoc:
        transforms[term.name] = omega[:, term.index]
    for name, values in transforms.items():
        if np.ptp(values) == 0:
            out[name] = {"x": [float(values[0])], "density": [float("inf")]}
            continue
        x = np.linspace(values.min(), values.max(), n_points)
        entry = {"x": x.tolist(), "density": gaussian_kde(values)(x).tolist()}
        if priors and name in {t.name for t in model.hyper.assoc}:
            prior = next(model.priors.sre_ind if t.kind == "SRE_ind" else model.priors.assoc
                         for t in model.hyper.assoc if t.name == name)
            entry["prior"] = norm.pdf(x, prior.mean, 1.0 / np.sqrt(prior.prec)).tolist()
        out[name] = entry
    return out


def baseline_curves(fit: FitResult, n_samples: Optional[int] = None, n_points: int = 50) -> pd.DataFrame:
    """Baseline hazard per survival submodel with posterior bands"""
    model = fit.model
    n = n_samples or model.controls.n_ic_samples
    rng = np.random.default_rng(model.controls.seed)
    frames = []
    for s in model.spec.survival:
        intercept = model.layout.fixed_slice(s.name).start
        cuts = model.cutpoints[s.name]
        if s.baseline.is_rw:
            sl = model.layout.baseline_slice(s.name)
            idx = [intercept] + list(range(sl.start, sl.stop))
            _, draws = sample_posterior(fit.points, n, indices=idx, rng=rng)
            times = cuts.midpoints
            hazard = np.exp(draws[:, :1] + draws[:, 1:])
        else:
            omega, draws = sample_posterior(fit.points, n, indices=[intercept], rng=rng)
            times = np.linspace(cuts.upper / n_points, cuts.upper, n_points)
            log_rate = draws[:, :1]
            if s.baseline == BaselineKind.WEIBULL:
                shape = np.exp(omega[:, [model.hyper.weibull[s.name]]])
                if s.variant == 0:
                    hazard = shape * np.exp(log_rate) * times[None, :] ** (shape - 1.0)
                else:
                    hazard = shape * np.exp(shape * log_rate) * times[None, :] ** (shape - 1.0)
            else:
                hazard = np.repeat(np.exp(log_rate), times.size, axis=1)
        q = np.quantile(hazard, PROBS, axis=0)
        frames.append(pd.DataFrame({
            "Outcome": s.name, "time": times, "mean": hazard.mean(axis=0), "sd": hazard.std(axis=0, ddof=1),
            "0.025quant": q[0], "0.5quant": q[1], "0.975quant": q[2],
        }))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["Outcome", "time"] + COLUMNS)

"""
Independent reference machinery for checking the engine.

- Componentwise random-walk Metropolis over (u, omega)
- Tensor-grid quadrature of the exact posterior for tiny models
- Breslow Cox partial-likelihood fit
- Joint longitudinal and survival data simulation

Metropolis and quadrature evaluate the same likelihood and prior code as the
engine; the Cox fit is written against the partial likelihood directly.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from lifelines import KaplanMeierFitter
from scipy import optimize, sparse, stats

from config.config import config_loader
from src.services.assembly import JointModel
from src.services.errors import DataValidationError, LikelihoodDomainError, ModelSpecError, SeparationError
from src.services.likelihoods import loglik

logger = logging.getLogger(__name__)

ADAPT_EVERY = 100
MAX_QUAD_LATENT = 5
MAX_QUAD_HYPER = 2
QUAD_CHUNK = 50000
SEPARATION_BOUND = 20.0


# ==================== Simulation ====================

@dataclass
class SimScenario:
    """True parameter values and design of a simulated joint data set"""
    n_subjects: int
    beta: Tuple[float, float, float]
    sigma_eps: float
    re_cov: np.ndarray
    baseline: str = "exponential"
    rate: float = 0.1
    shape: float = 1.0
    gamma: float = 0.0
    phi: float = 0.0
    association: str = "CV"
    visits: Tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
    max_follow_up: float = 10.0
    censoring_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        self.re_cov = np.atleast_2d(np.asarray(self.re_cov, dtype=float))
        errors = []
        if self.n_subjects < 1:
            errors.append("n_subjects must be >= 1")
        if self.re_cov.shape[0] != self.re_cov.shape[1] or self.re_cov.shape[0] not in (1, 2):
            errors.append(f"re_cov must be 1x1 or 2x2, got {self.re_cov.shape}")
        elif not np.allclose(self.re_cov, self.re_cov.T) or np.any(np.linalg.eigvalsh(self.re_cov) < 0):
            errors.append("re_cov must be symmetric positive semi-definite")
        if not (self.rate > 0 and self.shape > 0):
            errors.append("Hazard parameters must be positive")
        if self.baseline not in ("exponential", "weibull"):
            errors.append(f"Unknown baseline '{self.baseline}'")
        if self.association not in ("CV", "CS", "SRE"):
            errors.append(f"Unknown association '{self.association}'")
        if not self.sigma_eps > 0:
            errors.append("sigma_eps must be positive")
        if errors:
            raise ModelSpecError("Invalid simulation scenario", errors)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SimScenario":
        problems = config_loader.schema_errors(dict(doc), "scenario")
        if problems:
            raise ModelSpecError(f"Scenario does not match schema: {problems[0]}", problems)
        baseline = doc["baseline"]
        kwargs = {k: doc[k] for k in ("n_subjects", "beta", "sigma_eps", "re_cov", "gamma", "phi")}
        kwargs.update(baseline=baseline["kind"], rate=baseline.get("rate", 0.1), shape=baseline.get("shape", 1.0))
        for key in ("association", "max_follow_up", "censoring_rate", "seed"):
            if key in doc:
                kwargs[key] = doc[key]
        if "visits" in doc:
            kwargs["visits"] = tuple(doc["visits"])
        return cls(**kwargs)

    @property
    def n_random(self) -> int:
        return self.re_cov.shape[0]

    def model_document(self) -> Dict[str, Any]:
        """Model document that fits this scenario's generating model"""
        random = ["1", "time"][: self.n_random]
        return {
            "id_column": "id",
            "time_column": "time",
            "longitudinal": [{"response": "y", "family": "gaussian", "fixed": ["1", "time", "x"], "random": random}],
            "survival": [{
                "exit_time": "stime", "event": "event", "fixed": ["x"], "baseline": self.baseline,
            }],
            "assoc": [[self.association]],
        }


def _shared(scenario: SimScenario, t: np.ndarray, x: float, b: np.ndarray) -> np.ndarray:
    """Association signal s(t) of one subject"""
    b0 = b[0]
    b1 = b[1] if b.size > 1 else 0.0
    beta0, beta1, beta2 = scenario.beta
    if scenario.association == "CV":
        return beta0 + beta1 * t + beta2 * x + b0 + b1 * t
    if scenario.association == "CS":
        return np.full_like(t, beta1 + b1)
    return b0 + b1 * t


def _baseline_cumulative(scenario: SimScenario, t: np.ndarray) -> np.ndarray:
    if scenario.baseline == "weibull":
        return scenario.rate * np.power(t, scenario.shape)
    return scenario.rate * t


def _event_time(scenario: SimScenario, x: float, b: np.ndarray, target: float, grid: np.ndarray, tol: float) -> float:
    """Invert H(t) = target; H integrates exp(gamma x + phi s(t)) against the baseline cumulative hazard"""
    log_rel = scenario.gamma * x + scenario.phi * _shared(scenario, grid, x, b)
    rel = np.exp(log_rel)
    H0 = _baseline_cumulative(scenario, grid)
    if not np.all(np.isfinite(rel)):
        raise ModelSpecError("Hazard is not finite on the follow-up grid")
    H = np.concatenate([[0.0], np.cumsum(0.5 * (rel[1:] + rel[:-1]) * np.diff(H0))])
    if target >= H[-1]:
        return np.inf
    k = int(np.searchsorted(H, target, side="right")) - 1
    left, right = grid[k], grid[k + 1]

    def cumulative(t: float) -> float:
        r = float(np.exp(scenario.gamma * x + scenario.phi * _shared(scenario, np.array([t]), x, b)[0]))
        H0t = float(_baseline_cumulative(scenario, np.array([t]))[0])
        return H[k] + 0.5 * (rel[k] + r) * (H0t - H0[k])

    while right - left > tol:
        mid = 0.5 * (left + right)
        if cumulative(mid) < target:
            left = mid
        else:
            right = mid
    return 0.5 * (left + right)


def simulate_joint(scenario: SimScenario, rng: Optional[np.random.Generator] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Longitudinal and survival tables drawn from the scenario.

    Visits after the observed survival time are dropped. The `mu` column of the
    longitudinal table holds the noise-free trajectory.
    """
    defaults = config_loader.oracle_defaults()
    tol = float(defaults["bisection_tol"])
    grid = np.linspace(0.0, scenario.max_follow_up, int(defaults["hazard_grid"]))
    rng = rng or np.random.default_rng(scenario.seed)
    n = scenario.n_subjects

    x = rng.binomial(1, 0.5, n).astype(float)
    b = rng.multivariate_normal(np.zeros(scenario.n_random), scenario.re_cov, size=n, method="eigh")
    targets = rng.exponential(1.0, n)
    censor = rng.exponential(1.0 / scenario.censoring_rate, n) if scenario.censoring_rate > 0 else np.full(n, np.inf)

    long_rows, surv_rows = [], []
    visits = np.asarray(scenario.visits, dtype=float)
    beta0, beta1, beta2 = scenario.beta
    for i in range(n):
        event_time = _event_time(scenario, x[i], b[i], targets[i], grid, tol)
        stop = min(event_time, censor[i], scenario.max_follow_up)
        event = int(event_time <= min(censor[i], scenario.max_follow_up))
        surv_rows.append({"id": i + 1, "stime": stop, "event": event, "x": x[i]})
        kept = visits[visits <= stop]
        slope = b[i][1] if scenario.n_random > 1 else 0.0
        mu = beta0 + beta1 * kept + beta2 * x[i] + b[i][0] + slope * kept
        y = mu + rng.normal(0.0, scenario.sigma_eps, kept.size)
        for t, m, v in zip(kept, mu, y):
            long_rows.append({"id": i + 1, "time": t, "x": x[i], "y": v, "mu": m})

    long_table = pd.DataFrame(long_rows, columns=["id", "time", "x", "y", "mu"])
    surv_table = pd.DataFrame(surv_rows, columns=["id", "stime", "event", "x"])
    logger.info(f"Simulated {n} subjects: {int(surv_table['event'].sum())} events, {len(long_table)} visits")
    return long_table, surv_table


def simulate_replicates(scenario: SimScenario, n_replicates: int,
                        threads: Optional[int] = None) -> List[Tuple[pd.DataFrame, pd.DataFrame]]:
    """Independent data sets, one RNG stream per replicate"""
    streams = np.random.SeedSequence(scenario.seed).spawn(n_replicates)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: simulate_joint(scenario, np.random.default_rng(s)), streams))


def kaplan_meier(times, events) -> pd.DataFrame:
    """Kaplan-Meier survival estimate with its 95% band"""
    kmf = KaplanMeierFitter()
    kmf.fit(np.asarray(times, dtype=float), event_observed=np.asarray(events, dtype=int))
    table = kmf.survival_function_.join(kmf.confidence_interval_)
    table.columns = ["survival", "lower", "upper"]
    return table.rename_axis("time").reset_index()


def ks_exponential(times, rates):
    """KS test of rate_i * T_i against the unit exponential"""
    scaled = np.asarray(rates, dtype=float) * np.asarray(times, dtype=float)
    return stats.kstest(scaled, "expon")


# ==================== Cox partial likelihood ====================

@dataclass
class CoxFit:
    beta: np.ndarray
    se: np.ndarray
    loglik: float
    iterations: int


def _breslow(beta: np.ndarray, X: np.ndarray, events: np.ndarray, last_at_risk: np.ndarray,
             event_groups: List[np.ndarray]):
    lin = X @ beta
    w = np.exp(lin)
    S0 = np.cumsum(w)
    S1 = np.cumsum(w[:, None] * X, axis=0)
    S2 = np.cumsum(w[:, None, None] * X[:, :, None] * X[:, None, :], axis=0)
    value = float(lin[events == 1].sum())
    score = X[events == 1].sum(axis=0)
    info = np.zeros((X.shape[1], X.shape[1]))
    for idx, members in zip(last_at_risk, event_groups):
        d = members.size
        mean = S1[idx] / S0[idx]
        value -= d * np.log(S0[idx])
        score = score - d * mean
        info += d * (S2[idx] / S0[idx] - np.outer(mean, mean))
    return value, score, info


def cox_partial_fit(times, events, covariates, max_iter: int = 100, gtol: float = 1e-10) -> CoxFit:
    """
    Newton-Raphson on the Breslow partial log-likelihood.

    Raises:
        DataValidationError: no events
        SeparationError: estimates diverge or the information matrix is singular
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not events.any():
        raise DataValidationError("Cox fit needs at least one event")

    order = np.argsort(-times, kind="mergesort")
    times, events, X = times[order], events[order], X[order]
    event_times = np.unique(times[events == 1])
    # descending order: risk set of t is every row up to the last row with time >= t
    last_at_risk = np.searchsorted(-times, -event_times, side="right") - 1
    event_groups = [np.flatnonzero((times == t) & (events == 1)) for t in event_times]

    beta = np.zeros(X.shape[1])
    value, score, info = _breslow(beta, X, events, last_at_risk, event_groups)
    for iteration in range(1, max_iter + 1):
        if np.max(np.abs(score)) < gtol:
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SeparationError("Cox information matrix is singular")
        scale = 1.0
        while True:
            candidate = beta + scale * step
            new = _breslow(candidate, X, events, last_at_risk, event_groups)
            if new[0] >= value - 1e-12 * abs(value) or scale < 1e-8:
                break
            scale *= 0.5
        beta, (value, score, info) = candidate, new
        if np.any(np.abs(beta) > SEPARATION_BOUND):
            raise SeparationError(f"Cox estimate diverges (|beta| > {SEPARATION_BOUND:g}); covariates separate the events")
    else:
        raise SeparationError(f"Cox fit did not converge in {max_iter} iterations")
    try:
        se = np.sqrt(np.diag(np.linalg.inv(info)))
    except np.linalg.LinAlgError:
        raise SeparationError("Cox information matrix is singular")
    return CoxFit(beta=beta, se=se, loglik=value, iterations=iteration)


# ==================== Metropolis ====================

@dataclass
class MetropolisChain:
    """Post burn-in draws; columns are u then omega"""
    samples: np.ndarray
    n_latent: int
    acceptance: np.ndarray
    step_scales: np.ndarray
    burn_in: int

    @property
    def latent(self) -> np.ndarray:
        return self.samples[:, : self.n_latent]

    @property
    def omega(self) -> np.ndarray:
        return self.samples[:, self.n_latent:]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def sd(self) -> np.ndarray:
        return self.samples.std(axis=0, ddof=1)

    def mcse(self, n_batches: int = 50) -> np.ndarray:
        """Batch-means Monte Carlo standard error of the mean"""
        n = self.samples.shape[0] // n_batches * n_batches
        batches = self.samples[:n].reshape(n_batches, -1, self.samples.shape[1]).mean(axis=1)
        return batches.std(axis=0, ddof=1) / np.sqrt(n_batches)


def _log_target(model: JointModel, x: np.ndarray) -> float:
    u, omega = x[: model.n_latent], x[model.n_latent:]
    try:
        value = model.log_joint(u, omega)
    except (LikelihoodDomainError, np.linalg.LinAlgError, FloatingPointError):
        return -np.inf
    return value if np.isfinite(value) else -np.inf


class _ChainState:
    """
    Current (u, omega) with the pieces a single latent move needs.

    A latent step only touches the predictor rows in that column of A and one
    row of Q_prior, so its log-posterior change is computed from those alone.
    """

    def __init__(self, model: JointModel, x: np.ndarray):
        self.model = model
        self.k = model.n_latent
        self.mu = model.prior_mean()
        self.reset(x)

    def reset(self, x: np.ndarray) -> None:
        model = self.model
        self.x = np.asarray(x, dtype=float).copy()
        u, omega = self.x[: self.k], self.x[self.k:]
        self.A = sparse.csc_matrix(model.predictor.matrix(omega))
        self.Q = sparse.csc_matrix(model.prior_precision(omega))
        self.eta = self.A @ u
        self.row_values, _, _ = model.dataset.row_loglik(self.eta, omega)
        self.Qr = self.Q @ (u - self.mu)
        self.value = _log_target(model, self.x)

    def latent_delta(self, j: int, step: float) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
        """Log-posterior change of u_j += step, plus the touched rows and their new eta and values"""
        lo, hi = self.A.indptr[j], self.A.indptr[j + 1]
        rows = self.A.indices[lo:hi]
        eta = self.eta[rows] + step * self.A.data[lo:hi]
        try:
            values = self.model.dataset.rows_loglik(rows, eta, self.x[self.k:])
        except (LikelihoodDomainError, FloatingPointError):
            return -np.inf, rows, eta, np.full(rows.size, np.nan)
        q_jj = self.Q[j, j]
        change = float(np.sum(values) - np.sum(self.row_values[rows])) - step * self.Qr[j] - 0.5 * step * step * q_jj
        return (change if np.isfinite(change) else -np.inf), rows, eta, values

    def accept_latent(self, j: int, step: float, change: float, rows, eta, values) -> None:
        self.x[j] += step
        self.eta[rows] = eta
        self.row_values[rows] = values
        self.Qr += step * self.Q[:, j].toarray().ravel()
        self.value += change


def metropolis(
    model: JointModel,
    n_iter: int,
    step_scales: Optional[Sequence[float]] = None,
    seed: int = 0,
    burn_in: Optional[int] = None,
    init: Optional[np.ndarray] = None,
    thin: int = 1,
) -> MetropolisChain:
    """
    Componentwise random-walk Metropolis on the exact log posterior.

    Starts from zero latent values and the model's initial omega unless `init`
    is given. During burn-in each component's step is scaled by 0.8 or 1.2
    every 100 iterations to bring its acceptance rate into [0.2, 0.4]. Every
    `thin`-th post burn-in state is kept.
    """
    if n_iter < 1:
        raise ValueError(f"n_iter must be >= 1, got {n_iter}")
    if thin < 1:
        raise ValueError(f"thin must be >= 1, got {thin}")
    k = model.n_latent
    dim = k + model.n_hyper
    burn_in = n_iter // 5 if burn_in is None else int(burn_in)
    rng = np.random.default_rng(seed)
    scales = np.full(dim, 0.1) if step_scales is None else np.asarray(step_scales, dtype=float).copy()
    x0 = np.concatenate([np.zeros(k), model.initial_omega()]) if init is None else np.asarray(init, dtype=float)
    state = _ChainState(model, x0)
    if not np.isfinite(state.value):
        raise ValueError("Chain start has zero posterior density")

    n_post = max(n_iter - burn_in, 0)
    kept = np.empty((n_post // thin, dim))
    accepted = np.zeros(dim)
    window = np.zeros(dim)
    for it in range(n_iter):
        for j in range(dim):
            step = scales[j] * rng.standard_normal()
            log_u = np.log(rng.uniform())
            if j < k:
                change, rows, eta, values = state.latent_delta(j, step)
                move = log_u < change
                if move:
                    state.accept_latent(j, step, change, rows, eta, values)
            else:
                proposal = state.x.copy()
                proposal[j] += step
                candidate = _log_target(model, proposal)
                move = log_u < candidate - state.value
                if move:
                    state.reset(proposal)
            if move:
                window[j] += 1
                if it >= burn_in:
                    accepted[j] += 1
        if it < burn_in and (it + 1) % ADAPT_EVERY == 0:
            rate = window / ADAPT_EVERY
            scales = np.where(rate < 0.2, scales * 0.8, np.where(rate > 0.4, scales * 1.2, scales))
            window[:] = 0
        if it >= burn_in and (it - burn_in) % thin == 0 and (it - burn_in) // thin < kept.shape[0]:
            kept[(it - burn_in) // thin] = state.x
    n_kept = max(n_post, 1)
    logger.info(f"Metropolis: {n_iter} iterations, mean acceptance {np.mean(accepted / n_kept):.2f}")
    return MetropolisChain(samples=kept, n_latent=k, acceptance=accepted / n_kept,
                           step_scales=scales, burn_in=burn_in)


def run_chains(model: JointModel, n_chains: int, n_iter: int, seed: int = 0, threads: Optional[int] = None,
               **kwargs) -> List[MetropolisChain]:
    """Independent chains, each with its own seed"""
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_chains)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: metropolis(model, n_iter, seed=s, **kwargs), seeds))


# ==================== Quadrature ====================

@dataclass
class QuadraturePosterior:
    """Posterior moments of (u, omega) by tensor-grid integration"""
    names: List[str]
    mean: np.ndarray
    sd: np.ndarray
    log_evidence: float
    n_points: int
    centre: np.ndarray = field(repr=False, default=None)
    scale: np.ndarray = field(repr=False, default=None)


def batched_log_joint(model: JointModel, U: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """log_joint for every column of U at one omega"""
    eta = model.predictor.matrix(omega) @ U
    total = np.zeros(U.shape[1])
    for block in model.dataset.blocks:
        mask = block.observed
        if not mask.any():
            continue

        def column(arr, default):
            return default if arr is None else arr[mask][:, None]

        hyper = None if block.hyper_index is None else float(omega[block.hyper_index])
        value, _, _ = loglik(
            block.family, block.y[mask][:, None], eta[block.rows][mask], hyper,
            offset=column(block.offset, 0.0), ntrials=column(block.ntrials, 1),
            entry=column(block.entry, 0.0), exit=column(block.exit, None), variant=block.variant,
        )
        total += value.sum(axis=0)
    Q = model.prior_precision(omega)
    r = U - model.prior_mean()[:, None]
    quad = np.sum(r * (Q @ r), axis=0)
    total += 0.5 * model.prior_logdet(omega) - 0.5 * model.n_latent * np.log(2.0 * np.pi) - 0.5 * quad
    return total + model.log_prior_omega(omega)


def _joint_mode(model: JointModel) -> Tuple[np.ndarray, np.ndarray]:
    """Mode and curvature-based scales of the joint posterior"""
    k = model.n_latent
    x0 = np.concatenate([np.zeros(k), model.initial_omega()])

    def negative(x):
        value = _log_target(model, x)
        return 1e300 if not np.isfinite(value) else -value

    result = optimize.minimize(negative, x0, method="Nelder-Mead" if x0.size == 1 else "BFGS",
                               options={"gtol": 1e-8} if x0.size > 1 else {"xatol": 1e-10, "fatol": 1e-12})
    mode = result.x
    h = 1e-4
    dim = mode.size
    H = np.zeros((dim, dim))
    f0 = negative(mode)
    for i in range(dim):
        for j in range(i, dim):
            ei, ej = np.eye(dim)[i] * h, np.eye(dim)[j] * h
            if i == j:
                H[i, i] = (negative(mode + ei) - 2 * f0 + negative(mode - ei)) / h ** 2
            else:
                H[i, j] = H[j, i] = (negative(mode + ei + ej) - negative(mode + ei - ej)
                                     - negative(mode - ei + ej) + negative(mode - ei - ej)) / (4 * h ** 2)
    try:
        scale = np.sqrt(np.diag(np.linalg.inv(H)))
    except np.linalg.LinAlgError:
        scale = np.ones(dim)
    scale = np.where(np.isfinite(scale) & (scale > 0), scale, 1.0)
    return mode, scale


def quadrature_posterior(
    model: JointModel,
    n_latent_points: int = 15,
    n_hyper_points: int = 25,
    width: float = 6.0,
) -> QuadraturePosterior:
    """
    Normalised posterior moments on a tensor grid spanning the joint mode
    plus or minus `width` curvature standard deviations in every coordinate.

    Raises:
        ValueError: more than 5 latent or 2 hyperparameter dimensions
    """
    k, d = model.n_latent, model.n_hyper
    if k > MAX_QUAD_LATENT or d > MAX_QUAD_HYPER:
        raise ValueError(f"Quadrature supports at most {MAX_QUAD_LATENT} latent and {MAX_QUAD_HYPER} "
                         f"hyperparameter dimensions, got {k} and {d}")
    centre, scale = _joint_mode(model)
    axes = [np.linspace(c - width * s, c + width * s, n_latent_points if i < k else n_hyper_points)
            for i, (c, s) in enumerate(zip(centre, scale))]
    log_cell = float(sum(np.log(a[1] - a[0]) for a in axes))
    latent_grid = np.array(np.meshgrid(*axes[:k], indexing="ij")).reshape(k, -1) if k else np.zeros((0, 1))

    top = -np.inf
    s0, s1, s2 = 0.0, np.zeros(k + d), np.zeros(k + d)
    count = 0
    for hyper_point in itertools.product(*axes[k:]):
        omega = np.asarray(hyper_point, dtype=float)
        for start in range(0, latent_grid.shape[1], QUAD_CHUNK):
            U = latent_grid[:, start:start + QUAD_CHUNK]
            try:
                lp = batched_log_joint(model, U, omega)
            except LikelihoodDomainError:
                continue
            lp = np.where(np.isfinite(lp), lp, -np.inf)
            count += U.shape[1]
            chunk_top = lp.max()
            if not np.isfinite(chunk_top):
                continue
            if chunk_top > top:
                factor = np.exp(top - chunk_top) if np.isfinite(top) else 0.0
                s0, s1, s2 = s0 * factor, s1 * factor, s2 * factor
                top = chunk_top
            w = np.exp(lp - top)
            coords = np.vstack([U, np.repeat(omega[:, None], U.shape[1], axis=1)]) - centre[:, None]
            s0 += w.sum()
            s1 += coords @ w
            s2 += (coords ** 2) @ w
    if s0 == 0.0:
        raise ValueError("Posterior has no mass on the quadrature grid")
    offset = s1 / s0
    mean = centre + offset
    sd = np.sqrt(np.maximum(s2 / s0 - offset ** 2, 0.0))
    names = model.latent_names() + model.hyper.names
    logger.info(f"Quadrature over {count} points in {k + d} dimensions")
    return QuadraturePosterior(names=names, mean=mean, sd=sd, log_evidence=float(top + np.log(s0) + log_cell),
                               n_points=count, centre=centre, scale=scale)

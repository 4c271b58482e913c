"""
Acceptance suites run by `verify`.

Each suite returns CheckResult rows (PASS / FAIL / SKIP with the measured
value and its tolerance). The data builders here are shared with the test
suite so both exercise the same fixtures.
"""

import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from colorama import Fore, Style
from scipy import sparse
from scipy.integrate import trapezoid
from scipy.special import expit
from tabulate import tabulate

from src.services.assembly import JointModel, assemble
from src.services.errors import JointModelError
from src.services.inference import fit
from src.services.likelihoods import Family, FamilyKind, loglik
from src.services.model_spec import IntStrategy, parse_config
from src.services.oracle import SimScenario, cox_partial_fit, metropolis, quadrature_posterior, simulate_joint, simulate_replicates
from src.services.predict import PredictRequest, predict
from src.services.summaries import summarize
from src.services.surv_augment import decompose_table, make_cutpoints

logger = logging.getLogger(__name__)

PBC2_ENV = "LGMJOINT_PBC2_DIR"
FLAT_PREC = 1e-8
FLAT_LOG_PREC = -20.0
COX_RW_JITTER = 1e-7
MCMC_ITERATIONS = 300000
MCMC_THIN = 10

# posterior mean and sd of the bundled example1 model fitted to pbc2
REFERENCE_PBC2 = {
    "Intercept_L1": (4.7971, 0.0388),
    "year_L1": (-0.0051, 0.0038),
    "drugDpenicil_L1": (-0.1545, 0.0547),
    "year:drugDpenicil_L1": (-0.0014, 0.0053),
    "Intercept_L2": (5.5102, 0.0319),
    "year_L2": (-0.0478, 0.0009),
    "drugDpenicil_L2": (-0.1014, 0.0449),
    "year:drugDpenicil_L2": (0.0138, 0.0012),
    "drugDpenicil_S1": (0.1116, 0.1715),
    "CV_L1_S1": (1.3724, 0.2184),
    "CV_L2_S1": (-1.1338, 0.2072),
}


@dataclass
class CheckResult:
    suite: str
    check: str
    passed: bool
    value: float = float("nan")
    tolerance: float = float("nan")
    detail: str = ""
    seconds: float = 0.0
    skipped: bool = False

    @property
    def status(self) -> str:
        if self.skipped:
            return "SKIP"
        return "PASS" if self.passed else "FAIL"


# ==================== Data builders ====================

def cox_dataset(n: int = 200, beta: float = 0.7, seed: int = 0) -> pd.DataFrame:
    """Exponential survival with one binary covariate and random censoring"""
    rng = np.random.default_rng(seed)
    x = rng.binomial(1, 0.5, n).astype(float)
    t = rng.exponential(1.0 / (0.1 * np.exp(beta * x)))
    c = rng.exponential(1.0 / 0.05, n)
    return pd.DataFrame({"id": np.arange(1, n + 1), "stime": np.minimum(t, c), "event": (t <= c).astype(int), "x": x})


def cox_model(surv: pd.DataFrame) -> JointModel:
    """
    Flat-prior RW1 model with one interval per distinct exit time.

    Cutting at censoring times as well as event times gives every subject at
    risk in an interval the same exposure, so the profile likelihood of the
    coefficients is the Breslow partial likelihood. Intervals without events
    take a vanishing hazard.
    """
    cutpoints = np.unique(surv["stime"].to_numpy(dtype=float)).tolist()
    doc = {
        "id_column": "id",
        "time_column": "stime",
        "survival": [{"exit_time": "stime", "event": "event", "fixed": ["x"], "baseline": "rw1",
                      "cutpoints": cutpoints}],
        "controls": {"prior_fixed": {"prec": FLAT_PREC, "prec_intercept": FLAT_PREC}, "rw_jitter": COX_RW_JITTER},
    }
    return assemble(parse_config(doc, None, surv))


def cox_flat_omega(model: JointModel) -> np.ndarray:
    """Baseline log-precision pinned at FLAT_LOG_PREC: the RW1 increments carry no smoothing"""
    omega = model.initial_omega()
    for idx in model.hyper.rw.values():
        omega[idx] = FLAT_LOG_PREC
    return omega


def lmm_dataset(n_subjects: int = 30, n_visits: int = 5, sigma_b: float = 0.8, sigma_eps: float = 0.5,
                seed: int = 0) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    ids = np.repeat(np.arange(1, n_subjects + 1), n_visits)
    t = np.tile(np.arange(n_visits, dtype=float), n_subjects)
    b = np.repeat(rng.normal(0.0, sigma_b, n_subjects), n_visits)
    y = 1.0 + 0.5 * t + b + rng.normal(0.0, sigma_eps, ids.size)
    return pd.DataFrame({"id": ids, "time": t, "y": y})


LMM_DOCUMENT = {
    "id_column": "id",
    "time_column": "time",
    "longitudinal": [{"response": "y", "family": "gaussian", "fixed": ["1", "time"], "random": ["1"]}],
}


def lmm_truth_omega(model: JointModel, sigma_b: float = 0.8, sigma_eps: float = 0.5) -> np.ndarray:
    omega = np.zeros(model.n_hyper)
    for i, name in enumerate(model.hyper.names):
        if name.startswith("log_prec"):
            omega[i] = -2.0 * np.log(sigma_eps)
        elif "logdiag" in name:
            omega[i] = -np.log(sigma_b)
    return omega


def gls_posterior(model: JointModel, omega: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form latent mean and sd of a gaussian model at fixed omega"""
    A = sparse.csr_matrix(model.predictor.matrix(omega)).toarray()
    block = model.dataset.blocks[0]
    tau = np.exp(omega[block.hyper_index])
    Q = model.prior_precision(omega).toarray()
    precision = tau * A.T @ A + Q
    mean = np.linalg.solve(precision, tau * A.T @ block.y + Q @ model.prior_mean())
    return mean, np.sqrt(np.diag(np.linalg.inv(precision)))


POISSON_COUNTS = [[2, 3, 1, 4, 2], [5, 7, 6, 4, 8], [0, 1, 1, 0, 2]]

POISSON_DOCUMENT = {
    "id_column": "id",
    "time_column": "time",
    "longitudinal": [{"response": "count", "family": "poisson", "fixed": ["1"], "random": ["1"]}],
}


def poisson_ri_dataset() -> pd.DataFrame:
    rows = [{"id": i + 1, "time": float(j), "count": c} for i, counts in enumerate(POISSON_COUNTS) for j, c in enumerate(counts)]
    return pd.DataFrame(rows)


def mcmc_scenario(n_subjects: int = 100, seed: int = 1) -> SimScenario:
    """Gaussian marker with random intercept, exponential survival, current-value association"""
    return SimScenario(n_subjects=n_subjects, beta=(1.0, 0.3, 0.0), sigma_eps=0.5, re_cov=[[0.5]],
                       baseline="exponential", rate=0.05, gamma=0.3, phi=0.5, association="CV",
                       visits=(0.0, 1.0, 2.0, 3.0, 4.0, 5.0), max_follow_up=8.0, censoring_rate=0.05, seed=seed)


def competing_risk_dataset(n_subjects: int = 300, seed: int = 0) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Seven markers and two competing events laid out like the bundled example2 model document"""
    rng = np.random.default_rng(seed)
    drug = rng.binomial(1, 0.5, n_subjects).astype(float)
    sex = rng.binomial(1, 0.8, n_subjects).astype(float)
    b = rng.normal(0.0, 0.5, (n_subjects, 7))
    t_death = rng.exponential(1.0 / (0.08 * np.exp(0.5 * b[:, 0])))
    t_tsp = rng.exponential(1.0 / 0.03, n_subjects)
    censor = rng.uniform(2.0, 14.0, n_subjects)
    stop = np.minimum.reduce([t_death, t_tsp, censor])
    surv = pd.DataFrame({
        "id": np.arange(1, n_subjects + 1), "years": stop,
        "death": (t_death == stop).astype(int), "tsp": (t_tsp == stop).astype(int), "drugDpenicil": drug,
    })
    visits = np.array([0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0])
    rows = []
    for i in range(n_subjects):
        for t in visits[visits <= stop[i]]:
            rows.append({
                "id": i + 1, "year": t, "drugDpenicil": drug[i], "sexfemale": sex[i],
                "serBilir": 0.5 + 0.3 * t + b[i, 0] + rng.normal(0.0, 0.3),
                "platelets": rng.poisson(np.exp(5.5 - 0.05 * t + 0.5 * b[i, 1])),
                "SGOT": 4.7 + 0.01 * t + b[i, 2] + rng.normal(0.0, 0.3),
                "albumin": 3.5 - 0.05 * t + b[i, 3] + rng.normal(0.0, 0.3),
                "ascites": rng.binomial(1, expit(-2.0 + 0.2 * t + b[i, 4])),
                "spiders": rng.binomial(1, expit(-1.0 + 0.1 * t + b[i, 5])),
                "prothrombin": 2.4 + 0.01 * t + 0.2 * b[i, 6] + rng.normal(0.0, 0.1),
            })
    return pd.DataFrame(rows), surv


def load_pbc2(directory) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """pbc2.csv (visits) and pbc2.id.csv (one row per subject) with numeric indicator columns"""
    directory = Path(directory)
    long = pd.read_csv(directory / "pbc2.csv")
    surv = pd.read_csv(directory / "pbc2.id.csv")
    for table in (long, surv):
        table["drugDpenicil"] = (table["drug"] == "D-penicil").astype(float)
        if "sex" in table.columns:
            table["sexfemale"] = (table["sex"] == "female").astype(float)
    surv["status2"] = (surv["status"] != "alive").astype(int)
    surv["death"] = (surv["status"] == "dead").astype(int)
    surv["tsp"] = (surv["status"] == "transplanted").astype(int)
    return long, surv


# ==================== Suites ====================

def _timed(suite: str, check: str, fn: Callable[[], Tuple[bool, float, float, str]]) -> CheckResult:
    started = time.perf_counter()
    try:
        passed, value, tolerance, detail = fn()
    except JointModelError as e:
        passed, value, tolerance, detail = False, float("nan"), float("nan"), f"{type(e).__name__}: {e}"
    return CheckResult(suite, check, bool(passed), float(value), float(tolerance), detail, time.perf_counter() - started)


def suite_cox_equivalence(threads: Optional[int] = None) -> List[CheckResult]:
    def check():
        surv = cox_dataset()
        model = cox_model(surv)
        omega = cox_flat_omega(model)
        result = fit(model, fixed_omega=omega, threads=threads)
        beta = result.marginals.mean()[model.layout.fixed_slice("S1").start + 1]
        oracle = cox_partial_fit(surv["stime"], surv["event"], surv["x"])
        diff = abs(beta - oracle.beta[0])
        return diff < 1e-3, diff, 1e-3, f"engine {beta:.6f} vs Cox {oracle.beta[0]:.6f}"
    return [_timed("cox-equivalence", "coefficient matches Breslow fit", check)]


def suite_lmm_exactness(threads: Optional[int] = None) -> List[CheckResult]:
    model = assemble(parse_config(LMM_DOCUMENT, lmm_dataset()))
    omega = lmm_truth_omega(model)
    result = fit(model, fixed_omega=omega, threads=threads)
    mean, sd = gls_posterior(model, omega)
    mean_gap = float(np.max(np.abs(result.marginals.mean() - mean)))
    sd_gap = float(np.max(np.abs(result.marginals.sd() - sd)))
    return [
        CheckResult("lmm-exactness", "latent means equal GLS", mean_gap < 1e-8, mean_gap, 1e-8),
        CheckResult("lmm-exactness", "latent sds equal GLS", sd_gap < 1e-6, sd_gap, 1e-6),
    ]


def suite_quadrature_equivalence(threads: Optional[int] = None) -> List[CheckResult]:
    model = assemble(parse_config(POISSON_DOCUMENT, poisson_ri_dataset()))
    result = fit(model, strategy=IntStrategy.GRID, threads=threads)
    oracle = quadrature_posterior(model)
    mean, sd = result.hyper_posterior.moments()
    k = model.n_latent
    mean_rel = float(abs(mean[0] - oracle.mean[k]) / abs(oracle.mean[k]))
    sd_rel = float(abs(sd[0] - oracle.sd[k]) / oracle.sd[k])
    return [
        CheckResult("quadrature-equivalence", "hyperparameter mean", mean_rel < 0.02, mean_rel, 0.02),
        CheckResult("quadrature-equivalence", "hyperparameter sd", sd_rel < 0.02, sd_rel, 0.02),
    ]


def _joint_fit(scenario: SimScenario, long: pd.DataFrame, surv: pd.DataFrame, threads: Optional[int]):
    model = assemble(parse_config(scenario.model_document(), long, surv))
    return model, fit(model, threads=threads)


def suite_mcmc_equivalence(threads: Optional[int] = None, n_iter: int = MCMC_ITERATIONS) -> List[CheckResult]:
    scenario = mcmc_scenario()
    long, surv = simulate_joint(scenario)
    model, result = _joint_fit(scenario, long, surv, threads)
    chain = metropolis(model, n_iter, seed=scenario.seed, thin=MCMC_THIN)
    summary = summarize(result)
    out = []
    for name in model.layout.fixed_labels("L1") + model.layout.fixed_labels("S1") + ["CV_L1_S1"]:
        index = model.latent_names().index(name) if name in model.latent_names() \
            else model.n_latent + model.hyper.index(name)
        row = summary.row(name)
        gap = abs(chain.mean()[index] - row["mean"]) / row["sd"]
        out.append(CheckResult("mcmc-equivalence", name, gap < 0.5, float(gap), 0.5))
    return out


def suite_parameter_recovery(threads: Optional[int] = None, n_replicates: int = 20) -> List[CheckResult]:
    scenario = mcmc_scenario(n_subjects=300, seed=7)
    truth = {"Intercept_L1": scenario.beta[0], "time_L1": scenario.beta[1], "x_L1": scenario.beta[2],
             "x_S1": scenario.gamma, "CV_L1_S1": scenario.phi}
    covered = {name: 0 for name in truth}
    phi_means = []
    for long, surv in simulate_replicates(scenario, n_replicates, threads):
        _, result = _joint_fit(scenario, long, surv, threads)
        summary = summarize(result)
        for name, value in truth.items():
            row = summary.row(name)
            covered[name] += int(row["0.025quant"] <= value <= row["0.975quant"])
        phi_means.append(summary.row("CV_L1_S1")["mean"])
    out = [CheckResult("parameter-recovery", f"coverage {name}", 16 <= c <= n_replicates, c, 16)
           for name, c in covered.items()]
    bias = abs(float(np.mean(phi_means)) - scenario.phi)
    out.append(CheckResult("parameter-recovery", "phi bias", bias < 0.1, bias, 0.1))
    return out


def _gradient_gap() -> float:
    rng = np.random.default_rng(3)
    eta = rng.normal(0.0, 0.5, 20)
    h = 1e-6
    cases = [
        (Family(FamilyKind.GAUSSIAN), rng.normal(size=20), {"hyper": 0.3}),
        (Family(FamilyKind.POISSON), rng.poisson(2.0, 20), {}),
        (Family(FamilyKind.BINOMIAL), rng.binomial(3, 0.4, 20), {"ntrials": 3}),
        (Family(FamilyKind.WEIBULL_SURV), rng.binomial(1, 0.5, 20), {"hyper": 0.2, "exit": rng.uniform(0.5, 2.0, 20)}),
    ]
    worst = 0.0
    for family, y, kw in cases:
        _, d1, _ = loglik(family, y, eta, **kw)
        fd = (loglik(family, y, eta + h, **kw)[0] - loglik(family, y, eta - h, **kw)[0]) / (2 * h)
        worst = max(worst, float(np.max(np.abs(d1 - fd) / np.maximum(np.abs(fd), 1.0))))
    return worst


def suite_properties(threads: Optional[int] = None) -> List[CheckResult]:
    out = []
    gap = _gradient_gap()
    out.append(CheckResult("properties", "likelihood gradients match finite differences", gap < 1e-5, gap, 1e-5))

    rng = np.random.default_rng(5)
    exit_times = rng.uniform(0.1, 10.0, 50)
    entry = exit_times * rng.uniform(0.0, 0.5, 50)
    table = decompose_table(np.arange(50), entry, exit_times, rng.binomial(1, 0.5, 50), make_cutpoints(7, 10.0))
    totals = pd.Series(table.exposure).groupby(table.subject).sum().to_numpy()
    conservation = float(np.max(np.abs(totals - (exit_times - entry))))
    out.append(CheckResult("properties", "exposure conservation", conservation < 1e-12, conservation, 1e-12))

    lmm = assemble(parse_config(LMM_DOCUMENT, lmm_dataset(n_subjects=10)))
    lmm_fit = fit(lmm, threads=threads)
    masses = []
    for i in range(lmm_fit.model.layout.n_fixed):
        x, density = lmm_fit.marginals.marginal(i).density_grid()
        masses.append(abs(float(trapezoid(density, x)) - 1.0))
    out.append(CheckResult("properties", "marginal densities integrate to one", max(masses) < 1e-3, max(masses), 1e-3))

    first = summarize(lmm_fit).to_dict()
    second = summarize(fit(lmm, threads=1)).to_dict()
    out.append(CheckResult("properties", "seeded determinism", first == second, float(first == second), 1.0))

    scenario = mcmc_scenario(n_subjects=40, seed=11)
    long, surv = simulate_joint(scenario)
    model, joint = _joint_fit(scenario, long, surv, threads)
    subject = long[long["id"] == long["id"].iloc[0]]
    prediction = predict(joint, PredictRequest(new_data=subject, horizon=8.0, n_sample=30, n_sample_re=10, cif=True))
    s = prediction.survival
    monotone = bool(np.all(np.diff(s["Surv_Mean"].to_numpy()) <= 1e-12))
    out.append(CheckResult("properties", "survival curve non-increasing", monotone, float(monotone), 1.0))
    cif = s["CIF_Mean"].to_numpy()
    bounded = bool(np.all((cif >= -1e-12) & (cif <= 1.0 + 1e-12)))
    out.append(CheckResult("properties", "CIF within [0, 1]", bounded, float(bounded), 1.0))

    doc = scenario.model_document()
    doc["assoc"] = [[None]]
    separate = dict(doc, survival=[])
    separate.pop("assoc")
    joint_model = assemble(parse_config(doc, long, surv))
    long_model = assemble(parse_config(separate, long))
    omega = joint_model.initial_omega()
    long_omega = np.array([omega[joint_model.hyper.index(name)] for name in long_model.hyper.names])
    joint_means = fit(joint_model, fixed_omega=omega).marginals.mean()[joint_model.layout.fixed_slice("L1")]
    long_means = fit(long_model, fixed_omega=long_omega).marginals.mean()[long_model.layout.fixed_slice("L1")]
    factor_gap = float(np.max(np.abs(joint_means - long_means)))
    out.append(CheckResult("properties", "zero association factorises", factor_gap < 1e-6, factor_gap, 1e-6))
    return out


def suite_scalability(threads: Optional[int] = None) -> List[CheckResult]:
    from config.config import config_loader

    long, surv = competing_risk_dataset()
    model = assemble(parse_config(config_loader.model_document("example2"), long, surv))
    result = fit(model, strategy=IntStrategy.EB, threads=threads)
    values = summarize(result).to_dict()["sections"]
    finite = all(np.isfinite(v) for rows in values.values() for row in rows.values() for v in row.values())
    smallest = float(np.min(np.linalg.eigvalsh(-result.hessian)))
    return [
        CheckResult("scalability", "finite summaries", finite, float(finite), 1.0),
        CheckResult("scalability", "Hessian negative definite", smallest > 0, smallest, 0.0),
    ]


def suite_pbc2(threads: Optional[int] = None) -> List[CheckResult]:
    from config.config import config_loader

    directory = os.environ.get(PBC2_ENV)
    if not directory or not Path(directory).exists():
        logger.warning(f"Skipping pbc2 suite: set {PBC2_ENV} to a directory with pbc2.csv and pbc2.id.csv")
        return [CheckResult("pbc2", "example1 reference values", False, detail=f"{PBC2_ENV} not set", skipped=True)]
    long, surv = load_pbc2(directory)
    model = assemble(parse_config(config_loader.model_document("example1"), long, surv))
    summary = summarize(fit(model, threads=threads))
    out = []
    for name, (mean, sd) in REFERENCE_PBC2.items():
        gap = abs(summary.row(name)["mean"] - mean) / sd
        out.append(CheckResult("pbc2", name, gap < 3.0, float(gap), 3.0))
    return out


SUITES: Dict[str, Callable[..., List[CheckResult]]] = {
    "cox-equivalence": suite_cox_equivalence,
    "lmm-exactness": suite_lmm_exactness,
    "quadrature-equivalence": suite_quadrature_equivalence,
    "mcmc-equivalence": suite_mcmc_equivalence,
    "parameter-recovery": suite_parameter_recovery,
    "properties": suite_properties,
    "scalability": suite_scalability,
    "pbc2": suite_pbc2,
}


def available_suites() -> List[str]:
    return list(SUITES) + ["all"]


def run_suite(name: str, threads: Optional[int] = None) -> List[CheckResult]:
    """
    Raises:
        KeyError: unknown suite name
    """
    if name == "all":
        names = list(SUITES)
    elif name in SUITES:
        names = [name]
    else:
        raise KeyError(name)
    results = []
    for suite in names:
        started = time.perf_counter()
        logger.info(f"Running suite {suite}")
        rows = SUITES[suite](threads=threads)
        elapsed = time.perf_counter() - started
        for row in rows:
            row.seconds = row.seconds or elapsed
        results.extend(rows)
    return results


def all_passed(results: List[CheckResult]) -> bool:
    return all(r.passed or r.skipped for r in results)


def render(results: List[CheckResult]) -> str:
    colors = {"PASS": Fore.GREEN, "FAIL": Fore.RED, "SKIP": Fore.YELLOW}
    rows = [
        [r.suite, r.check, f"{colors[r.status]}{r.status}{Style.RESET_ALL}", r.value, r.tolerance, f"{r.seconds:.1f}s", r.detail]
        for r in results
    ]
    return tabulate(rows, headers=["suite", "check", "status", "value", "tolerance", "time", "detail"], floatfmt=".3g")

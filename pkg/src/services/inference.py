"""
Approximate inference engine.

Three steps: a Gaussian approximation of p(u | omega, D) by sparse Newton,
optimisation of the Laplace-approximated log p(omega | D), and exploration
of omega (empirical Bayes or a standardized grid) whose integration points
mix into the latent marginals.
"""

import itertools
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from cachetools import LRUCache
from scipy import sparse
from scipy.integrate import trapezoid
from scipy.optimize import brentq, minimize
from scipy.stats import norm

from src.services.assembly import JointModel
from src.services.errors import ConvergenceError, IndefiniteHessianError, LikelihoodDomainError
from src.services.likelihoods import AugmentedDataset, total_loglik
from src.services.model_spec import IntStrategy
from src.services.sparse_linalg import SparseCholesky

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 0.005
LOG_2PI = float(np.log(2.0 * np.pi))
MAX_AXIS_STEPS = 20
DENSITY_POINTS = 201


# ==================== Gaussian approximation ====================

@dataclass
class GaussianApprox:
    """Gaussian approximation of p(u | omega, D) at its mode"""
    mode: np.ndarray
    precision: sparse.csc_matrix
    factor: SparseCholesky
    logdet: float
    loglik: float
    iterations: int
    newton_steps: int
    step_norm: float
    flagged: bool = False
    constraint_V: Optional[np.ndarray] = None
    constraint_W: Optional[np.ndarray] = None
    constraints: Optional[sparse.csr_matrix] = None

    @property
    def n_latent(self) -> int:
        return self.mode.size

    def constraint_logdet(self) -> float:
        if self.constraint_W is None:
            return 0.0
        return float(np.linalg.slogdet(self.constraint_W)[1])

    def marginal_variances(self) -> np.ndarray:
        """Diagonal of the (constrained) conditional covariance"""
        var = self.factor.diag_inverse()
        if self.constraint_V is not None:
            VW = np.linalg.solve(self.constraint_W, self.constraint_V.T).T
            var = var - np.sum(VW * self.constraint_V, axis=1)
        return np.maximum(var, 0.0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """(n_latent, n) draws from the approximation"""
        z = rng.standard_normal((self.n_latent, n))
        x = self.factor.sample_standard(z)
        if self.constraint_V is not None:
            x = x - self.constraint_V @ np.linalg.solve(self.constraint_W, self.constraints @ x)
        return self.mode[:, None] + x


def _project(x: np.ndarray, factor: SparseCholesky, C: sparse.csr_matrix) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Condition x on C x = 0 under the precision held by factor (kriging)"""
    V = factor.solve(C.T.toarray())
    W = C @ V
    return x - V @ np.linalg.solve(W, C @ x), V, W


def gaussian_approx(
    A: sparse.spmatrix,
    Q: sparse.spmatrix,
    dataset: AugmentedDataset,
    omega: np.ndarray,
    u_init: Optional[np.ndarray] = None,
    tolerance: float = DEFAULT_TOLERANCE,
    prior_mean: Optional[np.ndarray] = None,
    constraints: Optional[sparse.csr_matrix] = None,
    max_iter: int = 100,
    w_floor: float = 1e-8,
    eta_offset: Optional[np.ndarray] = None,
) -> GaussianApprox:
    """
    Newton iterations on f(u) = sum loglik(A u) - 1/2 (u - mu)' Q (u - mu).

    Each step solves (A'WA + Q) delta = grad f with a sparse Cholesky factor
    and halves the step until f does not decrease. Stops when max|delta| is
    below tolerance; that last delta is applied without counting as a step.

    Raises:
        ConvergenceError: after max_iter iterations or for an indefinite Q*
    """
    A = sparse.csr_matrix(A)
    Q = sparse.csc_matrix(Q)
    n = Q.shape[0]
    mu = np.zeros(n) if prior_mean is None else np.asarray(prior_mean, dtype=float)
    offset = 0.0 if eta_offset is None else np.asarray(eta_offset, dtype=float)
    At = A.T.tocsr()
    observed = dataset.observed_mask()

    def objective(u):
        value, d1, d2 = total_loglik(dataset, A @ u + offset, omega)
        r = u - mu
        return value - 0.5 * r @ (Q @ r), value, d1, d2

    def factorize(u, d1, d2):
        w = np.where(observed, np.maximum(-d2, w_floor), 0.0)
        H = (At @ sparse.diags(w) @ A + Q).tocsc()
        try:
            factor = SparseCholesky(H)
        except np.linalg.LinAlgError as e:
            raise ConvergenceError(f"Conditional precision is not positive definite: {e}")
        return H, factor, At @ d1 - Q @ (u - mu)

    u = mu.copy() if u_init is None else np.asarray(u_init, dtype=float).copy()
    f, value, d1, d2 = objective(u)
    newton_steps = 0
    step_norm = np.inf
    for iteration in range(1, max_iter + 1):
        H, factor, grad = factorize(u, d1, d2)
        target = u + factor.solve(grad)
        if constraints is not None:
            target, _, _ = _project(target, factor, constraints)
        delta = target - u
        step_norm = float(np.max(np.abs(delta))) if n else 0.0
        if step_norm < tolerance:
            u = target
            f, value, d1, d2 = objective(u)
            break
        step = 1.0
        while True:
            candidate = u + step * delta
            try:
                f_new, v_new, g_new, h_new = objective(candidate)
            except LikelihoodDomainError:
                f_new = -np.inf
            if f_new >= f - 1e-12 * abs(f):
                break
            step *= 0.5
            if step < 1e-10:
                break
        if step < 1e-10:
            logger.debug(f"Line search stalled at iteration {iteration}; keeping current mode")
            break
        u, f, value, d1, d2 = candidate, f_new, v_new, g_new, h_new
        newton_steps += 1
    else:
        raise ConvergenceError(f"Inner Newton did not converge in {max_iter} iterations", iterations=max_iter)

    H, factor, _ = factorize(u, d1, d2)
    V = W = None
    if constraints is not None:
        _, V, W = _project(u, factor, constraints)
    approx = GaussianApprox(
        mode=u, precision=H, factor=factor, logdet=factor.logdet(), loglik=float(value),
        iterations=iteration, newton_steps=newton_steps, step_norm=step_norm,
        flagged=tolerance > DEFAULT_TOLERANCE, constraint_V=V, constraint_W=W, constraints=constraints,
    )
    logger.debug(f"Inner Newton converged: {iteration} iterations, {newton_steps} steps, |delta|={step_norm:.2e}")
    return approx


# ==================== Integration points and marginals ====================

@dataclass
class LaplaceEvaluation:
    omega: np.ndarray
    approx: GaussianApprox
    log_post: float


@dataclass
class IntegrationPoint:
    """One omega point with its normalised weight"""
    omega: np.ndarray
    z: np.ndarray
    weight: float
    log_post: float
    approx: GaussianApprox


@dataclass
class PosteriorMarginal:
    """Gaussian mixture marginal of one latent element"""
    means: np.ndarray
    sds: np.ndarray
    weights: np.ndarray

    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def sd(self) -> float:
        second = np.dot(self.weights, self.sds ** 2 + self.means ** 2)
        return float(np.sqrt(max(second - self.mean() ** 2, 0.0)))

    def cdf(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return norm.cdf((x[:, None] - self.means) / self._safe_sds) @ self.weights

    def pdf(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return norm.pdf((x[:, None] - self.means) / self._safe_sds) @ (self.weights / self._safe_sds)

    @property
    def _safe_sds(self) -> np.ndarray:
        return np.maximum(self.sds, 1e-300)

    def quantile(self, p: float) -> float:
        if self.means.size == 1 or np.ptp(self.means) == 0 and np.ptp(self.sds) == 0:
            return float(self.means[0] + self.sds[0] * norm.ppf(p))
        low = float(np.min(self.means - 10 * self.sds))
        high = float(np.max(self.means + 10 * self.sds))
        if low == high:
            return low
        return float(brentq(lambda x: self.cdf(x)[0] - p, low, high, xtol=1e-12))

    def quantiles(self, probs: Sequence[float] = (0.025, 0.5, 0.975)) -> List[float]:
        return [self.quantile(p) for p in probs]

    def density_grid(self, n_points: int = DENSITY_POINTS) -> Tuple[np.ndarray, np.ndarray]:
        mean, sd = self.mean(), self.sd()
        if sd == 0:
            return np.array([mean]), np.array([np.inf])
        low = min(mean - 6 * sd, float(np.min(self.means - 6 * self.sds)))
        high = max(mean + 6 * sd, float(np.max(self.means + 6 * self.sds)))
        x = np.linspace(low, high, n_points)
        return x, self.pdf(x)

    def total_mass(self) -> float:
        x, density = self.density_grid()
        return float(trapezoid(density, x))


@dataclass
class LatentMarginals:
    """Mixture marginals of all latent elements over the integration points"""
    means: np.ndarray
    sds: np.ndarray
    weights: np.ndarray

    def marginal(self, i: int) -> PosteriorMarginal:
        return PosteriorMarginal(self.means[:, i], self.sds[:, i], self.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def sd(self) -> np.ndarray:
        second = self.weights @ (self.sds ** 2 + self.means ** 2)
        return np.sqrt(np.maximum(second - self.mean() ** 2, 0.0))

    def quantiles(self, i: int, probs: Sequence[float] = (0.025, 0.5, 0.975)) -> List[float]:
        return self.marginal(i).quantiles(probs)


def latent_marginals(points: Sequence[IntegrationPoint]) -> LatentMarginals:
    """Weight-mixtures of the conditional Gaussians at every point"""
    if not points:
        raise ValueError("latent_marginals needs at least one integration point")
    means = np.vstack([p.approx.mode for p in points])
    sds = np.vstack([np.sqrt(p.approx.marginal_variances()) for p in points])
    weights = np.asarray([p.weight for p in points])
    return LatentMarginals(means=means, sds=sds, weights=weights / weights.sum())


# ==================== Hyperparameter posterior ====================

def _split_moments(sigma_minus: np.ndarray, sigma_plus: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = np.sqrt(2.0 / np.pi) * (sigma_plus - sigma_minus)
    second = (sigma_minus ** 3 + sigma_plus ** 3) / (sigma_minus + sigma_plus)
    return mean, second - mean ** 2


@dataclass
class HyperPosterior:
    """
    Posterior of omega in standardized coordinates z, omega = mode + T z.

    Each z_j follows a split normal whose two scales come from the log-density
    drop one grid step away from the mode (unit scales without a grid).
    """
    mode: np.ndarray
    transform: np.ndarray
    sigma_minus: np.ndarray
    sigma_plus: np.ndarray
    fixed: bool = False

    @classmethod
    def from_hessian(cls, mode, hessian, axis_drops: Optional[Dict[Tuple[int, int], float]] = None,
                     dz: float = 1.0) -> "HyperPosterior":
        mode = np.asarray(mode, dtype=float)
        d = mode.size
        if d == 0:
            return cls(mode, np.zeros((0, 0)), np.ones(0), np.ones(0))
        values, vectors = np.linalg.eigh(-np.asarray(hessian, dtype=float))
        transform = vectors / np.sqrt(values)
        scales = {-1: np.ones(d), 1: np.ones(d)}
        for (j, sign), drop in (axis_drops or {}).items():
            if drop > 1e-12:
                scales[sign][j] = float(np.clip(dz / np.sqrt(2.0 * drop), 0.1, 10.0))
        return cls(mode, transform, scales[-1], scales[1])

    @classmethod
    def point_mass(cls, mode) -> "HyperPosterior":
        mode = np.asarray(mode, dtype=float)
        d = mode.size
        return cls(mode, np.zeros((d, d)), np.ones(d), np.ones(d), fixed=True)

    @property
    def dim(self) -> int:
        return self.mode.size

    def moments(self) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and sd of each omega component"""
        m, v = _split_moments(self.sigma_minus, self.sigma_plus)
        return self.mode + self.transform @ m, np.sqrt((self.transform ** 2) @ v)

    def sample_z(self, rng: np.random.Generator, n: int) -> np.ndarray:
        half = np.abs(rng.standard_normal((n, self.dim)))
        p_neg = self.sigma_minus / (self.sigma_minus + self.sigma_plus)
        negative = rng.random((n, self.dim)) < p_neg
        return np.where(negative, -half * self.sigma_minus, half * self.sigma_plus)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """(n, d) omega draws"""
        if self.fixed or self.dim == 0:
            return np.tile(self.mode, (n, 1))
        return self.mode + self.sample_z(rng, n) @ self.transform.T


# ==================== Engine ====================

@dataclass
class OptimizationResult:
    mode: np.ndarray
    log_post: float
    iterations: int
    message: str


@dataclass
class FitResult:
    """Everything a fitted joint model carries"""
    model: JointModel
    strategy: IntStrategy
    mode: np.ndarray
    hessian: np.ndarray
    points: List[IntegrationPoint]
    marginals: LatentMarginals
    hyper_posterior: HyperPosterior
    mlik_integration: float
    mlik_gaussian: float
    n_outer_iter: int = 0
    seconds: float = 0.0
    fixed_omega: bool = False

    @property
    def weights(self) -> np.ndarray:
        return np.asarray([p.weight for p in self.points])

    def hyper_grid_mean(self) -> np.ndarray:
        """Weighted mean of omega over the integration points"""
        return self.weights @ np.vstack([p.omega for p in self.points])


class InferenceEngine:
    """Laplace evaluations of one assembled model, cached per omega"""

    def __init__(self, model: JointModel, threads: Optional[int] = None, cache_size: int = 512):
        self.model = model
        self.controls = model.controls
        self.threads = threads or self.controls.threads or os.cpu_count() or 1
        self._cache: LRUCache = LRUCache(maxsize=cache_size)
        self._lock = threading.Lock()
        self._anchor: Optional[np.ndarray] = None
        self.axis_drops: Dict[Tuple[int, int], float] = {}
        self.n_evaluations = 0
        if self.controls.tolerance > DEFAULT_TOLERANCE:
            logger.warning(f"Inner tolerance {self.controls.tolerance} is looser than the default {DEFAULT_TOLERANCE}")

    # ---- Laplace ----

    def laplace(self, omega) -> LaplaceEvaluation:
        omega = np.asarray(omega, dtype=float)
        key = omega.tobytes()
        with self._lock:
            cached = self._cache.get(key)
            anchor = self._anchor
        if cached is not None:
            logger.debug("Laplace cache hit")
            return cached
        model = self.model
        approx = gaussian_approx(
            model.predictor.matrix(omega), model.prior_precision(omega), model.dataset, omega,
            u_init=anchor, tolerance=self.controls.tolerance, prior_mean=model.prior_mean(),
            constraints=model.constraints, max_iter=self.controls.max_inner_iter, w_floor=self.controls.w_floor,
        )
        r = approx.mode - model.prior_mean()
        Q = model.prior_precision(omega)
        log_post = (
            approx.loglik
            + 0.5 * model.prior_logdet(omega) - 0.5 * float(r @ (Q @ r))
            + model.log_prior_omega(omega)
            - 0.5 * approx.logdet
        )
        if model.constraints is not None:
            log_post += 0.5 * model.prior_constraint_logdet(omega) - 0.5 * approx.constraint_logdet()
        evaluation = LaplaceEvaluation(omega=omega.copy(), approx=approx, log_post=float(log_post))
        with self._lock:
            self._cache[key] = evaluation
            self.n_evaluations += 1
        logger.debug(f"log_post_omega = {log_post:.6f}")
        return evaluation

    def log_post_omega(self, omega) -> float:
        """Laplace approximation of log p(omega | D) up to a constant"""
        return self.laplace(omega).log_post

    def _safe_log_post(self, omega) -> float:
        try:
            return self.log_post_omega(omega)
        except (LikelihoodDomainError, ConvergenceError) as e:
            logger.debug(f"log_post_omega failed at {omega}: {e}")
            return -np.inf

    def _map(self, fn, items) -> List:
        items = list(items)
        if self.threads <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            return list(executor.map(fn, items))

    def set_anchor(self, omega) -> None:
        mode = self.laplace(omega).approx.mode
        with self._lock:
            self._anchor = mode.copy()

    # ---- outer optimisation ----

    def gradient(self, omega, h: Optional[float] = None) -> np.ndarray:
        """Central finite-difference gradient of log_post_omega"""
        h = h or self.controls.h_step
        omega = np.asarray(omega, dtype=float)
        d = omega.size
        shifts = [omega + s * h * np.eye(d)[i] for i in range(d) for s in (1.0, -1.0)]
        values = np.asarray(self._map(self._safe_log_post, shifts)).reshape(d, 2)
        return (values[:, 0] - values[:, 1]) / (2.0 * h)

    def optimize_omega(self, init=None) -> OptimizationResult:
        """
        BFGS ascent of log_post_omega with central-difference gradients.

        Raises:
            ConvergenceError: when max_outer_iter iterations are exhausted
        """
        x0 = self.model.initial_omega() if init is None else np.asarray(init, dtype=float)
        self.set_anchor(x0)
        iterations = {"n": 0}

        def objective(x):
            value = self._safe_log_post(x)
            return -value if np.isfinite(value) else np.inf

        def jac(x):
            return -self.gradient(x)

        def callback(xk):
            iterations["n"] += 1
            try:
                self.set_anchor(xk)
            except (LikelihoodDomainError, ConvergenceError):
                pass

        result = minimize(
            objective, x0, jac=jac, method="BFGS", callback=callback,
            options={"gtol": self.controls.outer_gtol, "maxiter": self.controls.max_outer_iter},
        )
        if not result.success:
            if result.nit >= self.controls.max_outer_iter:
                raise ConvergenceError(
                    f"Hyperparameter optimisation did not converge in {result.nit} iterations", iterations=result.nit
                )
            logger.warning(f"Hyperparameter optimisation stopped early: {result.message}")
        mode = np.asarray(result.x, dtype=float)
        self.set_anchor(mode)
        log_post = self.log_post_omega(mode)
        logger.info(f"Outer optimisation finished: {result.nit} iterations, log posterior {log_post:.4f}")
        return OptimizationResult(mode=mode, log_post=log_post, iterations=int(result.nit), message=str(result.message))

    def hessian(self, mode, h: Optional[float] = None) -> np.ndarray:
        """Finite-difference Hessian of log_post_omega"""
        h = h or 2.0 * self.controls.h_step
        mode = np.asarray(mode, dtype=float)
        d = mode.size
        e = np.eye(d) * h
        center = self.log_post_omega(mode)
        diag_points = [mode + s * e[i] for i in range(d) for s in (1.0, -1.0)]
        pairs = [(i, j) for i in range(d) for j in range(i)]
        cross_points = [mode + si * e[i] + sj * e[j] for i, j in pairs for si, sj in
                        ((1, 1), (1, -1), (-1, 1), (-1, -1))]
        values = self._map(self._safe_log_post, diag_points + cross_points)
        H = np.zeros((d, d))
        for i in range(d):
            H[i, i] = (values[2 * i] - 2.0 * center + values[2 * i + 1]) / h ** 2
        offset = 2 * d
        for k, (i, j) in enumerate(pairs):
            pp, pm, mp, mm = values[offset + 4 * k: offset + 4 * k + 4]
            H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4.0 * h ** 2)
        if not np.all(np.isfinite(H)):
            raise IndefiniteHessianError("Non-finite Hessian of the hyperparameter posterior")
        return H

    def explore_omega(self, mode, strategy: IntStrategy, hessian: Optional[np.ndarray] = None) -> List[IntegrationPoint]:
        """
        Integration points over omega.

        eb: the mode alone. grid: axis walks of step grid_dz in the eigenbasis
        of -H while the log-density drop stays below grid_log_drop, then the
        tensor fill-in of the kept axis levels under the same rule.

        Raises:
            IndefiniteHessianError: -H is not positive definite
        """
        mode = np.asarray(mode, dtype=float)
        center = self.laplace(mode)
        strategy = IntStrategy(strategy)
        d = mode.size
        self.axis_drops = {}
        if strategy == IntStrategy.EB or d == 0:
            return [IntegrationPoint(omega=mode, z=np.zeros(d), weight=1.0, log_post=center.log_post, approx=center.approx)]

        values, vectors = np.linalg.eigh(-hessian)
        if np.any(values <= 0):
            raise IndefiniteHessianError(f"Hyperparameter Hessian is not negative definite (eigenvalues {values})")
        transform = vectors / np.sqrt(values)
        dz, max_drop = self.controls.grid_dz, self.controls.grid_log_drop

        def at(z):
            return mode + transform @ z

        evaluated: Dict[Tuple[int, ...], float] = {tuple([0] * d): center.log_post}
        levels = {j: [0] for j in range(d)}
        active = [(j, s) for j in range(d) for s in (1, -1)]
        for k in range(1, MAX_AXIS_STEPS + 1):
            if not active:
                break
            keys = []
            for j, s in active:
                key = [0] * d
                key[j] = s * k
                keys.append(tuple(key))
            lps = self._map(self._safe_log_post, [at(np.asarray(key) * dz) for key in keys])
            still = []
            for (j, s), key, lp in zip(active, keys, lps):
                drop = center.log_post - lp
                if k == 1:
                    self.axis_drops[(j, s)] = drop
                if np.isfinite(lp) and drop < max_drop:
                    evaluated[key] = lp
                    levels[j].append(s * k)
                    still.append((j, s))
            active = still

        candidates = []
        for combo in itertools.product(*[sorted(levels[j]) for j in range(d)]):
            if sum(c != 0 for c in combo) < 2:
                continue
            if 0.5 * float(np.sum((np.asarray(combo) * dz) ** 2)) >= 2.0 * max_drop:
                continue
            candidates.append(combo)
        lps = self._map(self._safe_log_post, [at(np.asarray(c) * dz) for c in candidates])
        for combo, lp in zip(candidates, lps):
            if np.isfinite(lp) and center.log_post - lp < max_drop:
                evaluated[combo] = lp

        keys = sorted(evaluated)
        log_posts = np.asarray([evaluated[key] for key in keys])
        weights = np.exp(log_posts - log_posts.max())
        weights /= weights.sum()
        points = []
        for key, lp, w in zip(keys, log_posts, weights):
            z = np.asarray(key, dtype=float) * dz
            evaluation = self.laplace(at(z))
            points.append(IntegrationPoint(omega=evaluation.omega, z=z, weight=float(w), log_post=float(lp),
                                           approx=evaluation.approx))
        logger.info(f"Grid exploration: {len(points)} integration points in {d} dimensions")
        return points


def sample_posterior(
    points: Sequence[IntegrationPoint],
    n: int,
    indices: Optional[Sequence[int]] = None,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    n joint draws of (omega, u[indices]): a point by weight, then u from its
    Gaussian approximation (constraint-corrected).

    Returns:
        Tuple of (omega draws (n, d), latent draws (n, len(indices)))
    """
    rng = rng or np.random.default_rng(seed)
    d = points[0].omega.size if points else 0
    n_latent = points[0].approx.n_latent if points else 0
    idx = np.arange(n_latent) if indices is None else np.asarray(indices, dtype=int)
    omega = np.empty((n, d))
    latent = np.empty((n, idx.size))
    if n == 0:
        return omega, latent
    weights = np.asarray([p.weight for p in points])
    chosen = rng.choice(len(points), size=n, p=weights / weights.sum())
    for h in np.unique(chosen):
        rows = np.flatnonzero(chosen == h)
        draws = points[h].approx.sample(rng, rows.size)
        omega[rows] = points[h].omega
        latent[rows] = draws[idx].T
    return omega, latent


def _mlik(points: List[IntegrationPoint], hessian: np.ndarray, center_lp: float, dz: float,
          strategy: IntStrategy) -> Tuple[float, float]:
    d = hessian.shape[0]
    if d == 0:
        return center_lp, center_lp
    logdet = float(np.linalg.slogdet(-hessian)[1])
    gaussian = center_lp + 0.5 * d * LOG_2PI - 0.5 * logdet
    if strategy == IntStrategy.EB or len(points) == 1:
        return gaussian, gaussian
    lps = np.asarray([p.log_post for p in points])
    top = lps.max()
    integration = top + float(np.log(np.sum(np.exp(lps - top)))) + d * np.log(dz) - 0.5 * logdet
    return integration, gaussian


def fit(
    model: JointModel,
    strategy: Optional[IntStrategy] = None,
    fixed_omega: Optional[np.ndarray] = None,
    threads: Optional[int] = None,
    init: Optional[np.ndarray] = None,
) -> FitResult:
    """
    Run the full pipeline on an assembled model.

    With fixed_omega the hyperparameters are held at that value and the
    latent marginals come from the single Gaussian approximation there.
    """
    started = time.perf_counter()
    strategy = IntStrategy(strategy or model.controls.int_strategy)
    engine = InferenceEngine(model, threads=threads)
    d = model.n_hyper

    if fixed_omega is not None:
        mode = np.asarray(fixed_omega, dtype=float)
        engine.set_anchor(mode)
        evaluation = engine.laplace(mode)
        points = [IntegrationPoint(omega=mode, z=np.zeros(d), weight=1.0, log_post=evaluation.log_post,
                                   approx=evaluation.approx)]
        hessian = -np.eye(d)
        hyper = HyperPosterior.point_mass(mode)
        iterations = 0
        strategy = IntStrategy.EB
        mlik = (evaluation.log_post, evaluation.log_post)
    else:
        if d == 0:
            mode = np.zeros(0)
            engine.set_anchor(mode)
            iterations = 0
            hessian = np.zeros((0, 0))
        else:
            result = engine.optimize_omega(init)
            mode, iterations = result.mode, result.iterations
            hessian = engine.hessian(mode)
            if np.any(np.linalg.eigvalsh(-hessian) <= 0):
                raise IndefiniteHessianError("Hyperparameter Hessian at the mode is not negative definite")
        points = engine.explore_omega(mode, strategy, hessian)
        hyper = HyperPosterior.from_hessian(mode, hessian, engine.axis_drops, model.controls.grid_dz) if d else \
            HyperPosterior.point_mass(mode)
        mlik = _mlik(points, hessian, engine.log_post_omega(mode), model.controls.grid_dz, strategy)

    marginals = latent_marginals(points)
    seconds = time.perf_counter() - started
    logger.info(f"Fit finished in {seconds:.2f}s with {len(points)} integration points ({strategy.value})")
    return FitResult(
        model=model, strategy=strategy, mode=mode, hessian=hessian, points=points, marginals=marginals,
        hyper_posterior=hyper, mlik_integration=mlik[0], mlik_gaussian=mlik[1], n_outer_iter=iterations,
        seconds=seconds, fixed_omega=fixed_omega is not None,
    )

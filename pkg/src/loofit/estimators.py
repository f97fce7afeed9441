"""Objectives and estimators.

Leave-one-out conditional scores and log-likelihoods for the direct,
latent and non-stationary lattice models, a Nelder-Mead maximiser in log
parameter space, and the finite-difference Godambe sandwich for asymptotic
standard deviations.

Scaling convention: every objective is reported per observation per
replicate, so values are comparable across lattice sizes and replicate
counts. All objectives are positively oriented (maximised).

The direct-model leave-one-out path touches the precision only through
matrix-vector products, so a full objective evaluation triggers no
factorization; the likelihood path factorises a dense copy of Q by design
(the package deliberately exhibits the cost contrast instead of shipping a
sparse solver).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import rng
from .gmrf import (
    Dataset,
    ModelKind,
    ModelSpec,
    Theta,
    build_fem_matrices,
    build_precision,
    mean_vector,
)
from .linalg import NotPositiveDefiniteError, cholesky, spmv
from .scoring import GaussPredictive, ScoringRule, score_values

_LOG_2PI = math.log(2.0 * math.pi)

# Infeasible evaluations (non-finite parameters, failed factorization) return
# this base minus a violation magnitude, which keeps the simplex away from
# the bad region without constrained optimisation.
PENALTY_BASE = -1e10


# ---------------------------------------------------------------------------
# Estimation methods
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Method:
    """Estimation method: maximum likelihood or LOOS under a scoring rule."""

    kind: str  # "ml" | "loos"
    rule: ScoringRule | None = None

    def __post_init__(self):
        if self.kind not in ("ml", "loos"):
            raise ValueError("method kind must be 'ml' or 'loos'")
        if self.kind == "loos" and self.rule is None:
            raise ValueError("loos methods need a scoring rule")
        if self.kind == "ml" and self.rule is not None:
            raise ValueError("ml takes no scoring rule")

    @property
    def label(self) -> str:
        return "ml" if self.kind == "ml" else f"loos:{self.rule.name}"


VALID_METHODS_HELP = "ml, loos:log, loos:crps, loos:scrps, loos:root, loos:rcrps:<cutoff>"


def parse_method(text: str) -> Method:
    t = text.strip().lower()
    if t == "ml":
        return Method("ml")
    if t.startswith("loos:"):
        try:
            return Method("loos", ScoringRule.parse(t[len("loos:"):]))
        except ValueError as e:
            raise ValueError(f"bad method {text!r}: {e}; valid methods: {VALID_METHODS_HELP}") from None
    raise ValueError(f"unknown method {text!r}; valid methods: {VALID_METHODS_HELP}")


def default_methods(rcrps_cutoff: float = 2.0) -> tuple[str, ...]:
    # canonical column order: likelihood first, then rules by efficiency
    return ("ml", "loos:log", "loos:scrps", "loos:root", "loos:crps",
            f"loos:rcrps:{rcrps_cutoff:g}")


# ---------------------------------------------------------------------------
# Parameter vector packing
# ---------------------------------------------------------------------------

def parameter_names(model: ModelSpec) -> list[str]:
    names = ["log_tau", "log_kappa"]
    if model.kind is not ModelKind.DIRECT:
        names.append("log_sigma_eps")
    if model.covariates is not None:
        names.extend(f"beta{j}" for j in range(model.covariates.shape[1]))
    return names


def theta_to_vector(theta: Theta, model: ModelSpec) -> np.ndarray:
    vec = [theta.log_tau, theta.log_kappa]
    if model.kind is not ModelKind.DIRECT:
        if theta.log_sigma_eps is None:
            raise ValueError("latent models need theta.log_sigma_eps")
        vec.append(theta.log_sigma_eps)
    if model.covariates is not None:
        if theta.beta is None or len(theta.beta) != model.covariates.shape[1]:
            raise ValueError("theta.beta must match the design matrix columns")
        vec.extend(theta.beta)
    return np.asarray(vec, dtype=float)


def theta_from_vector(vec, model: ModelSpec) -> Theta:
    vec = np.asarray(vec, dtype=float)
    k = 2 if model.kind is ModelKind.DIRECT else 3
    beta = None
    if model.covariates is not None:
        p = model.covariates.shape[1]
        if vec.size != k + p:
            raise ValueError(f"expected {k + p} parameters, got {vec.size}")
        beta = tuple(vec[k:])
    elif vec.size != k:
        raise ValueError(f"expected {k} parameters, got {vec.size}")
    return Theta(
        log_tau=float(vec[0]),
        log_kappa=float(vec[1]),
        log_sigma_eps=None if model.kind is ModelKind.DIRECT else float(vec[2]),
        beta=beta,
    )


# ---------------------------------------------------------------------------
# Per-theta prepared state
# ---------------------------------------------------------------------------

def direct_conditionals_from_precision(q, mu, y_rows):
    """Leave-one-out conditional (means, sd) straight from a sparse precision.

    mean_i = y_i + ((Q mu)_i - (Q y)_i) / Q_ii and sd_i = Q_ii^{-1/2}; the
    cost is one sparse matvec per replicate row and no factorization.
    """
    y_rows = np.atleast_2d(np.asarray(y_rows, dtype=float))
    qdiag = q.diagonal()
    if np.any(qdiag <= 0):
        raise NotPositiveDefiniteError(int(np.argmin(qdiag)))
    qmu = spmv(q, mu) if np.any(mu) else np.zeros(q.n_rows)
    qy = (q.to_scipy() @ y_rows.T).T
    means = y_rows + (qmu[None, :] - qy) / qdiag[None, :]
    return means, 1.0 / np.sqrt(qdiag)


def gaussian_loglik_rows(q, factor, mu, y_rows) -> np.ndarray:
    """Per-replicate log density of N(mu, Q^{-1}), divided by the dimension."""
    y_rows = np.atleast_2d(np.asarray(y_rows, dtype=float))
    n = q.n_rows
    r = y_rows - np.asarray(mu, dtype=float)[None, :]
    qr = (q.to_scipy() @ r.T).T
    quad = np.einsum("ij,ij->i", r, qr)
    return (0.5 * factor.log_det - 0.5 * n * _LOG_2PI - 0.5 * quad) / n


class _DirectState:
    """Everything reusable across replicates for a direct model at one theta."""

    def __init__(self, theta, model, matrices, need_factor):
        c, g = matrices
        self.q = build_precision(theta, model, c, g)
        self.mu = mean_vector(theta, model)
        self.qdiag = self.q.diagonal()
        if np.any(self.qdiag <= 0):
            raise NotPositiveDefiniteError(int(np.argmin(self.qdiag)))
        self.sd = 1.0 / np.sqrt(self.qdiag)
        self.qmu = spmv(self.q, self.mu) if self.mu.any() else np.zeros(model.lattice.n)
        self.factor = cholesky(self.q.toarray(), overwrite=True) if need_factor else None
        self.n = model.lattice.n

    def conditional_means(self, y_rows: np.ndarray) -> np.ndarray:
        qy = (self.q.to_scipy() @ y_rows.T).T
        return y_rows + (self.qmu[None, :] - qy) / self.qdiag[None, :]

    def loos_rows(self, y_rows, rule) -> np.ndarray:
        means = self.conditional_means(y_rows)
        scores = score_values(rule, means, self.sd[None, :], y_rows)
        return scores.mean(axis=1)

    def loglik_rows(self, y_rows) -> np.ndarray:
        return gaussian_loglik_rows(self.q, self.factor, self.mu, y_rows)

    def per_replicate(self, y_rows, method: Method) -> np.ndarray:
        if method.kind == "ml":
            return self.loglik_rows(y_rows)
        return self.loos_rows(y_rows, method.rule)


class _LatentState:
    """Prepared state for latent models: one dense factorization per theta.

    Works through the precision P of the observation marginal
    Sigma_Y = A Q^{-1} A^T + sigma^2 I via the Woodbury form
    P = I/sigma^2 - A Qpost^{-1} A^T / sigma^4 with Qpost = Q + A^T A / sigma^2,
    which gives every leave-one-out conditional exactly:
    mean_i = y_i - (P(y - mu_Y))_i / P_ii and sd_i = P_ii^{-1/2}.
    """

    def __init__(self, theta, model, matrices, need_loglik):
        if theta.sigma_eps is None:
            raise ValueError("latent models need theta.log_sigma_eps")
        c, g = matrices
        self.model = model
        self.sigma2 = theta.sigma_eps**2
        self.obs = np.asarray(model.obs_indices, dtype=int)
        n, m = model.lattice.n, self.obs.size
        self.q = build_precision(theta, model, c, g)
        self.mu = mean_vector(theta, model)
        self.mu_y = self.mu[self.obs]
        ind = np.zeros(n)
        ind[self.obs] = 1.0 / self.sigma2
        qpost = self.q.to_scipy() + sp.diags(ind)
        self.post_factor = cholesky(qpost.toarray(), overwrite=True)
        e_obs = np.zeros((n, m))
        e_obs[self.obs, np.arange(m)] = 1.0
        z = self.post_factor.solve_lower(e_obs)
        dqi = np.einsum("ij,ij->j", z, z)  # diag of Qpost^{-1} at observed nodes
        self.pdiag = 1.0 / self.sigma2 - dqi / self.sigma2**2
        if np.any(self.pdiag <= 0):
            raise NotPositiveDefiniteError(int(np.argmin(self.pdiag)))
        self.sd = 1.0 / np.sqrt(self.pdiag)
        self.logdet_sigma_y = None
        if need_loglik:
            q_factor = cholesky(self.q.toarray(), overwrite=True)
            self.logdet_sigma_y = (
                self.post_factor.log_det - q_factor.log_det + m * math.log(self.sigma2)
            )

    def _posterior_solves(self, y_rows):
        """Qpost^{-1} A^T r for each replicate row; returns (r, t) arrays."""
        r = y_rows - self.mu_y[None, :]
        w = np.zeros((self.model.lattice.n, y_rows.shape[0]))
        w[self.obs, :] = r.T
        t = self.post_factor.solve(w)
        return r, t

    def conditional_means(self, y_rows) -> np.ndarray:
        r, t = self._posterior_solves(y_rows)
        pr = r / self.sigma2 - t[self.obs, :].T / self.sigma2**2
        return y_rows - pr / self.pdiag[None, :]

    def loos_rows(self, y_rows, rule) -> np.ndarray:
        means = self.conditional_means(y_rows)
        scores = score_values(rule, means, self.sd[None, :], y_rows)
        return scores.mean(axis=1)

    def loglik_rows(self, y_rows) -> np.ndarray:
        m = self.obs.size
        r, t = self._posterior_solves(y_rows)
        quad = (
            np.einsum("ij,ij->i", r, r) / self.sigma2
            - np.einsum("ij,ji->i", r, t[self.obs, :]) / self.sigma2**2
        )
        val = -0.5 * (m * _LOG_2PI + self.logdet_sigma_y + quad)
        return val / m

    def per_replicate(self, y_rows, method: Method) -> np.ndarray:
        if method.kind == "ml":
            return self.loglik_rows(y_rows)
        return self.loos_rows(y_rows, method.rule)

    def predictive(self, y: np.ndarray, test_indices) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and sd of held-out observations given one replicate.

        Posterior of the field given all training observations, read off at
        the test nodes, plus the measurement-noise variance.
        """
        test = np.asarray(test_indices, dtype=int)
        _, t = self._posterior_solves(y[None, :])
        mu_post = self.mu + t[:, 0] / self.sigma2
        e_test = np.zeros((self.model.lattice.n, test.size))
        e_test[test, np.arange(test.size)] = 1.0
        z = self.post_factor.solve_lower(e_test)
        var = np.einsum("ij,ij->j", z, z) + self.sigma2
        return mu_post[test], np.sqrt(var)


def prepare_state(theta: Theta, model: ModelSpec, method: Method, matrices):
    need_factor = method.kind == "ml"
    if model.kind is ModelKind.DIRECT:
        return _DirectState(theta, model, matrices, need_factor)
    return _LatentState(theta, model, matrices, need_factor)


# ---------------------------------------------------------------------------
# Public conditional and objective operations
# ---------------------------------------------------------------------------

def _as_predictives(means, sds):
    return [GaussPredictive(float(m), float(s)) for m, s in zip(means, sds)]


def loo_conditionals_direct(theta: Theta, y, model: ModelSpec,
                            matrices=None) -> list[GaussPredictive]:
    """Leave-one-out conditionals X_i | x_{-i} for a fully observed field."""
    if model.kind is not ModelKind.DIRECT:
        raise ValueError("model is not direct")
    matrices = matrices or build_fem_matrices(model.lattice)
    state = _DirectState(theta, model, matrices, need_factor=False)
    means = state.conditional_means(np.atleast_2d(np.asarray(y, dtype=float)))[0]
    return _as_predictives(means, state.sd)


def loo_conditionals_latent(theta: Theta, y, model: ModelSpec,
                            matrices=None) -> list[GaussPredictive]:
    """Leave-one-out conditionals Y_i | y_{-i} for noisy observations."""
    if model.kind is ModelKind.DIRECT:
        raise ValueError("model is not latent")
    matrices = matrices or build_fem_matrices(model.lattice)
    state = _LatentState(theta, model, matrices, need_loglik=False)
    means = state.conditional_means(np.atleast_2d(np.asarray(y, dtype=float)))[0]
    return _as_predictives(means, state.sd)


@dataclass
class Objective:
    """An estimation objective bound to a model and a dataset."""

    method: Method
    model: ModelSpec
    data: Dataset
    _matrices: tuple = field(default=None, repr=False, compare=False)

    @property
    def matrices(self):
        if self._matrices is None:
            self._matrices = build_fem_matrices(self.model.lattice)
        return self._matrices

    def evaluate(self, theta: Theta) -> float:
        state = prepare_state(theta, self.model, self.method, self.matrices)
        return float(state.per_replicate(self.data.replicates, self.method).mean())

    def evaluate_vector(self, vec) -> float:
        """Penalty-guarded evaluation used by the optimiser."""
        vec = np.asarray(vec, dtype=float)
        if not np.all(np.isfinite(vec)):
            return PENALTY_BASE - float(np.sum(~np.isfinite(vec)))
        if np.any(np.abs(vec) > 200.0):
            # log-parameters beyond e^200 can only be runaway simplex steps;
            # penalising here keeps exp/underflow out of the matrix algebra
            return PENALTY_BASE - float(np.abs(vec).sum())
        try:
            value = self.evaluate(theta_from_vector(vec, self.model))
        except NotPositiveDefiniteError as e:
            return PENALTY_BASE - float(1 + e.pivot)
        except (OverflowError, FloatingPointError):
            return PENALTY_BASE - float(np.minimum(np.abs(vec), 1e6).sum())
        if not math.isfinite(value):
            return PENALTY_BASE - 1.0
        return value


def loos_objective(theta: Theta, objective: Objective) -> float:
    """Mean over replicates and observations of the leave-one-out score."""
    if objective.method.kind != "loos":
        raise ValueError("objective kind is not LOOS")
    return objective.evaluate(theta)


def loglik_objective(theta: Theta, objective: Objective) -> float:
    """Average log density per observation per replicate."""
    if objective.method.kind != "ml":
        raise ValueError("objective kind is not log-likelihood")
    return objective.evaluate(theta)


# ---------------------------------------------------------------------------
# Nelder-Mead
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitOptions:
    xtol: float = 1e-6
    ftol: float = 1e-6
    step: float = 0.1  # initial simplex step in log-parameter space
    max_evals: int | None = None  # default 500 * n_params


def nelder_mead(fn, x0, options: FitOptions = FitOptions()):
    """Maximise fn by the Nelder-Mead simplex.

    Converged means the simplex collapsed: max vertex distance below xtol
    and value spread below ftol. Returns (x_best, f_best, n_evals, converged).
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    max_evals = options.max_evals or 500 * n
    evals = 0

    def g(x):
        nonlocal evals
        evals += 1
        return -fn(x)

    verts = [x0.copy()]
    for i in range(n):
        v = x0.copy()
        v[i] += options.step
        verts.append(v)
    vals = [g(v) for v in verts]
    converged = False

    while True:
        order = np.argsort(vals, kind="stable")
        verts = [verts[k] for k in order]
        vals = [vals[k] for k in order]
        diam = max(np.max(np.abs(v - verts[0])) for v in verts[1:])
        if diam < options.xtol and (vals[-1] - vals[0]) < options.ftol:
            converged = True
            break
        if evals >= max_evals:
            break
        centroid = np.mean(verts[:-1], axis=0)
        xr = centroid + (centroid - verts[-1])
        fr = g(xr)
        if fr < vals[0]:
            xe = centroid + 2.0 * (centroid - verts[-1])
            fe = g(xe)
            if fe < fr:
                verts[-1], vals[-1] = xe, fe
            else:
                verts[-1], vals[-1] = xr, fr
        elif fr < vals[-2]:
            verts[-1], vals[-1] = xr, fr
        else:
            if fr < vals[-1]:
                xc = centroid + 0.5 * (centroid - verts[-1])
                fc = g(xc)
                accept = fc <= fr
            else:
                xc = centroid - 0.5 * (centroid - verts[-1])
                fc = g(xc)
                accept = fc < vals[-1]
            if accept:
                verts[-1], vals[-1] = xc, fc
            else:
                for k in range(1, n + 1):
                    verts[k] = verts[0] + 0.5 * (verts[k] - verts[0])
                    vals[k] = g(verts[k])
        if evals >= max_evals:
            break

    best = int(np.argmin(vals))
    return verts[best], -vals[best], evals, converged


@dataclass
class FitResult:
    theta_hat: Theta
    objective_value: float
    n_evaluations: int
    converged: bool
    wall_time: float
    method: Method
    estimates: dict[str, float]  # parameter name -> fitted value (log scale)


def fit(objective: Objective, init: Theta, options: FitOptions = FitOptions()) -> FitResult:
    """Maximise the objective from `init`; deterministic given data and options."""
    x0 = theta_to_vector(init, objective.model)
    t0 = time.perf_counter()
    x, fx, n_evals, converged = nelder_mead(objective.evaluate_vector, x0, options)
    wall = time.perf_counter() - t0
    if fx <= 0.5 * PENALTY_BASE:
        converged = False
    return FitResult(
        theta_hat=theta_from_vector(x, objective.model),
        objective_value=float(fx),
        n_evaluations=n_evals,
        converged=converged,
        wall_time=wall,
        method=objective.method,
        estimates={k: float(v) for k, v in zip(parameter_names(objective.model), x)},
    )


# ---------------------------------------------------------------------------
# Godambe sandwich
# ---------------------------------------------------------------------------

@dataclass
class GodambeResult:
    parameters: list[str]
    j: np.ndarray
    k: np.ndarray
    v: np.ndarray
    asymptotic_sd: np.ndarray
    method: Method | None = None


def _fd_points(theta0: np.ndarray, h: np.ndarray):
    """Central-difference stencil: centre, +-h_i, and the four cross corners."""
    p = theta0.size
    points = [theta0.copy()]
    index = {"centre": 0}
    for i in range(p):
        for s in (+1, -1):
            v = theta0.copy()
            v[i] += s * h[i]
            index[(i, s)] = len(points)
            points.append(v)
    for i in range(p):
        for j in range(i + 1, p):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                v = theta0.copy()
                v[i] += si * h[i]
                v[j] += sj * h[j]
                index[(i, j, si, sj)] = len(points)
                points.append(v)
    return points, index


def _sandwich_from_values(values: np.ndarray, h: np.ndarray, index) -> tuple[np.ndarray, np.ndarray]:
    n_data = values.shape[0]
    p = h.size
    grads = np.empty((n_data, p))
    hessians = np.empty((n_data, p, p))
    centre = values[:, index["centre"]]
    for i in range(p):
        vp = values[:, index[(i, 1)]]
        vm = values[:, index[(i, -1)]]
        grads[:, i] = (vp - vm) / (2.0 * h[i])
        hessians[:, i, i] = (vp + vm - 2.0 * centre) / h[i] ** 2
    for i in range(p):
        for j in range(i + 1, p):
            vpp = values[:, index[(i, j, 1, 1)]]
            vpm = values[:, index[(i, j, 1, -1)]]
            vmp = values[:, index[(i, j, -1, 1)]]
            vmm = values[:, index[(i, j, -1, -1)]]
            hij = (vpp - vpm - vmp + vmm) / (4.0 * h[i] * h[j])
            hessians[:, i, j] = hij
            hessians[:, j, i] = hij
    j_mat = np.einsum("di,dj->ij", grads, grads) / n_data
    k_mat = hessians.mean(axis=0)
    return j_mat, k_mat


def _sandwich_variance(j_mat, k_mat, parameters):
    k_sym = 0.5 * (k_mat + k_mat.T)
    eigvals, eigvecs = np.linalg.eigh(k_sym)
    if np.min(np.abs(eigvals)) < 1e-12 * max(1.0, np.max(np.abs(eigvals))):
        null = eigvecs[:, int(np.argmin(np.abs(eigvals)))]
        terms = ", ".join(f"{p}={w:+.3f}" for p, w in zip(parameters, null))
        raise np.linalg.LinAlgError(f"singular sensitivity matrix K; null direction {terms}")
    kinv = np.linalg.solve(k_sym, np.eye(k_sym.shape[0]))
    v = kinv @ j_mat @ kinv.T
    v = 0.5 * (v + v.T)
    return v


def godambe_from_values(values: np.ndarray, h, index, parameters,
                        method: Method | None = None) -> GodambeResult:
    h = np.asarray(h, dtype=float)
    j_mat, k_mat = _sandwich_from_values(values, h, index)
    v = _sandwich_variance(j_mat, k_mat, parameters)
    return GodambeResult(
        parameters=list(parameters),
        j=j_mat,
        k=k_mat,
        v=v,
        asymptotic_sd=np.sqrt(np.maximum(np.diag(v), 0.0)),
        method=method,
    )


def godambe_generic(eval_fn, theta0, datasets, fd_step: float = 1e-4,
                    parameters=None) -> GodambeResult:
    """Sandwich estimate from an arbitrary per-dataset objective callable.

    `eval_fn(theta_vector, dataset)` must return the objective value; the
    gradient and Hessian at theta0 are formed by (nested) central
    differences with relative step fd_step, then J is the average outer
    product of gradients, K the average Hessian, and V = K^{-1} J K^{-T}.
    """
    theta0 = np.asarray(theta0, dtype=float)
    p = theta0.size
    parameters = list(parameters) if parameters else [f"theta{i}" for i in range(p)]
    h = fd_step * np.maximum(1.0, np.abs(theta0))
    points, index = _fd_points(theta0, h)
    values = np.empty((len(datasets), len(points)))
    for s, vec in enumerate(points):
        for d, data in enumerate(datasets):
            values[d, s] = eval_fn(vec, data)
    return godambe_from_values(values, h, index, parameters)


def godambe(theta0: Theta, model: ModelSpec, method: Method, n_sims: int, seed,
            fd_step: float = 1e-4, n_replicates: int = 10,
            matrices=None) -> GodambeResult:
    """Monte Carlo Godambe matrix of an estimation method at theta0.

    Simulates `n_sims` datasets of `n_replicates` field draws and forms the
    per-observation sandwich V = K^{-1} J K^{-T}:

    * K is the average finite-difference Hessian of the per-replicate
      objective (equal to the average per-observation score Hessian),
    * J averages the outer products of per-observation score gradients,
      without cross-observation terms; for the likelihood, whose score does
      not decompose per observation, J is the outer product of the
      per-replicate gradient rescaled by the observation count.

    `asymptotic_sd` is therefore on the per-observation asymptotic scale
    that makes methods comparable (an estimate from N effectively
    independent observations has approximate variance V/N); it is not the
    sampling variance of one dataset's estimate.
    """
    if n_sims < 100:
        raise ValueError("n_sims must be at least 100")
    matrices = matrices or build_fem_matrices(model.lattice)
    theta0_vec = theta_to_vector(theta0, model)
    parameters = parameter_names(model)
    p = theta0_vec.size
    h = fd_step * np.maximum(1.0, np.abs(theta0_vec))
    points, index = _fd_points(theta0_vec, h)

    datasets = _simulate_many(theta0, model, n_sims, n_replicates, seed, matrices)
    rows = datasets.reshape(-1, datasets.shape[-1])  # one row per replicate
    states = {}
    values = np.empty((rows.shape[0], len(points)))
    for s, vec in enumerate(points):
        state = prepare_state(theta_from_vector(vec, model), model, method, matrices)
        states[s] = state
        values[:, s] = state.per_replicate(rows, method)

    # K: average Hessian of the per-replicate (per-observation-scaled) objective
    k_mat = np.empty((p, p))
    centre = values[:, index["centre"]]
    for i in range(p):
        vp = values[:, index[(i, 1)]]
        vm = values[:, index[(i, -1)]]
        k_mat[i, i] = ((vp + vm - 2.0 * centre) / h[i] ** 2).mean()
    for i in range(p):
        for j in range(i + 1, p):
            vpp = values[:, index[(i, j, 1, 1)]]
            vpm = values[:, index[(i, j, 1, -1)]]
            vmp = values[:, index[(i, j, -1, 1)]]
            vmm = values[:, index[(i, j, -1, -1)]]
            k_mat[i, j] = k_mat[j, i] = ((vpp - vpm - vmp + vmm) / (4.0 * h[i] * h[j])).mean()

    m_obs = model.m
    if method.kind == "ml":
        grads = np.empty((rows.shape[0], p))
        for i in range(p):
            grads[:, i] = (values[:, index[(i, 1)]] - values[:, index[(i, -1)]]) / (2.0 * h[i])
        j_mat = m_obs * np.einsum("ri,rj->ij", grads, grads) / rows.shape[0]
    else:
        slabs = []
        for i in range(p):
            sp_ = _per_term_scores(states[index[(i, 1)]], rows, method.rule)
            sm_ = _per_term_scores(states[index[(i, -1)]], rows, method.rule)
            slabs.append((sp_ - sm_) / (2.0 * h[i]))
        j_mat = np.empty((p, p))
        count = rows.shape[0] * m_obs
        for i in range(p):
            for j in range(i, p):
                j_mat[i, j] = j_mat[j, i] = float(np.sum(slabs[i] * slabs[j])) / count

    v = _sandwich_variance(j_mat, k_mat, parameters)
    return GodambeResult(
        parameters=parameters,
        j=j_mat,
        k=k_mat,
        v=v,
        asymptotic_sd=np.sqrt(np.maximum(np.diag(v), 0.0)),
        method=method,
    )


def _per_term_scores(state, y_rows, rule) -> np.ndarray:
    """Matrix of per-observation leave-one-out scores, one row per replicate."""
    means = state.conditional_means(y_rows)
    return score_values(rule, means, state.sd[None, :], y_rows)


def _simulate_many(theta0, model, n_sims, n_replicates, seed, matrices):
    """(n_sims, n_replicates, m) observation stack, one factorization total."""
    q = build_precision(theta0, model, *matrices)
    mu = mean_vector(theta0, model)
    factor = cholesky(q.toarray(), overwrite=True)
    n = model.lattice.n
    out = np.empty((n_sims, n_replicates, model.m))
    sigma_eps = theta0.sigma_eps
    for d in range(n_sims):
        for r in range(n_replicates):
            z = rng.stream((seed, d), rng.FIELD, r).standard_normal(n)
            x = mu + factor.solve_lower_t(z)
            if model.kind is ModelKind.DIRECT:
                out[d, r] = x
            else:
                eps = rng.stream((seed, d), rng.NOISE, r).standard_normal(model.m)
                out[d, r] = x[np.asarray(model.obs_indices)] + sigma_eps * eps
    return out

"""Mixture Markov models with covariate-dependent cluster priors.

Cluster membership follows a multinomial logit on [1, z]; cluster 0 is the
reference with coefficients fixed at zero. Fitting is multi-restart EM:
components are re-estimated from posterior-weighted counts and the logit
coefficients by damped Newton-Raphson on the weighted multinomial
log-likelihood.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .errors import ConfigError, DataError, FitFailedError, NumericalError
from .graph import TransitionNetwork
from .markov import TransitionModel, row_normalize, safe_log, sequence_counts
from .sequences import Alphabet, StateSequence

log = logging.getLogger(__name__)

INTERCEPT = "(Intercept)"


@dataclass(frozen=True, eq=False)
class MixtureModel:
    alphabet: Alphabet
    components: tuple[TransitionModel, ...]
    beta: np.ndarray  # (K-1, d+1); the reference cluster is implicit
    covariate_names: tuple[str, ...] = ()

    @property
    def K(self) -> int:
        return len(self.components)

    def full_beta(self) -> np.ndarray:
        return np.vstack([np.zeros((1, self.beta.shape[1])), self.beta])

    def prior(self, z=None) -> np.ndarray:
        """Cluster prior probabilities for a covariate vector (or a matrix of them)."""
        X = design_matrix_from(z, len(self.covariate_names))
        eta = X @ self.full_beta().T
        p = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))
        return p[0] if np.ndim(z) <= 1 else p


def design_matrix_from(z, d: int) -> np.ndarray:
    if z is None:
        z = np.zeros((1, d))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != d:
        raise DataError(f"expected {d} covariates, got {z.shape[1]}")
    return np.hstack([np.ones((z.shape[0], 1)), z])


@dataclass(eq=False)
class FitResult:
    model: MixtureModel
    log_likelihood: float
    bic: float
    n_parameters: int
    n_sequences: int
    posteriors: np.ndarray
    n_restarts: int
    n_restarts_converged_to_best: int
    n_degenerate: int
    trace: list[float]
    converged: bool
    design: np.ndarray = field(repr=False)
    component_loglik: np.ndarray = field(repr=False)

    @property
    def K(self) -> int:
        return self.model.K

    @property
    def assignments(self) -> np.ndarray:
        return self.posteriors.argmax(axis=1)

    def cluster_labels(self) -> list[str]:
        return cluster_labels(self.K)


def cluster_labels(K: int) -> list[str]:
    return [f"Cluster {k + 1}" for k in range(K)]


def covariate_matrix(sequences: Sequence[StateSequence], names: Sequence[str] | None) -> tuple[np.ndarray, tuple[str, ...]]:
    if names is None:
        return np.zeros((len(sequences), 0)), ()
    names = tuple(names)
    Z = np.zeros((len(sequences), len(names)))
    for i, seq in enumerate(sequences):
        for j, name in enumerate(names):
            if name not in seq.covariates:
                raise DataError(f"unit {seq.unit_id!r} lacks covariate {name!r}")
            Z[i, j] = seq.covariates[name]
    if not np.all(np.isfinite(Z)):
        raise DataError("covariates must be finite")
    return Z, names


def _component_loglik(init: np.ndarray, trans: np.ndarray, pi: np.ndarray, P: np.ndarray) -> np.ndarray:
    """(n, K) log P_k(sequence_i); -inf where a used cell has probability 0."""
    K, S = pi.shape
    Pf = P.reshape(K, S * S)
    L = init @ np.where(pi > 0, safe_log(pi), 0.0).T + trans @ np.where(Pf > 0, safe_log(Pf), 0.0).T
    impossible = (init @ (pi == 0).T + trans @ (Pf == 0).T) > 0
    L[impossible] = -np.inf
    return L


def _log_prior(X: np.ndarray, beta_free: np.ndarray) -> np.ndarray:
    eta = np.hstack([np.zeros((X.shape[0], 1)), X @ beta_free.T])
    return eta - logsumexp(eta, axis=1, keepdims=True)


def _beta_newton(X: np.ndarray, w: np.ndarray, beta: np.ndarray, max_iter: int = 25,
                 tol: float = 1e-10) -> np.ndarray:
    """Increase sum_ik w_ik log pi_ik(beta) by damped Newton steps."""
    K = w.shape[1]
    if K == 1:
        return beta
    if X.shape[1] == 1:
        mass = w.sum(axis=0)
        with np.errstate(divide="ignore"):
            return (np.log(mass[1:]) - np.log(mass[0]))[:, None]
    p = X.shape[1]

    def objective(b):
        return float((w * _log_prior(X, b)).sum())

    current = objective(beta)
    for _ in range(max_iter):
        pi = np.exp(_log_prior(X, beta))[:, 1:]
        grad = ((w[:, 1:] - pi).T @ X).ravel()
        # Hessian of the multinomial log-likelihood, blocks (k, l) over free clusters
        H = np.zeros(((K - 1) * p, (K - 1) * p))
        for k in range(K - 1):
            for l in range(k, K - 1):
                c = pi[:, k] * ((k == l) - pi[:, l])
                block = -(X * c[:, None]).T @ X
                H[k * p:(k + 1) * p, l * p:(l + 1) * p] = block
                H[l * p:(l + 1) * p, k * p:(k + 1) * p] = block
        try:
            step = np.linalg.solve(H - 1e-10 * np.eye(H.shape[0]), -grad)
        except np.linalg.LinAlgError:
            step = grad
        step = step.reshape(K - 1, p)
        t = 1.0
        while t > 1e-8:
            cand = beta + t * step
            val = objective(cand)
            if val >= current:
                break
            t *= 0.5
        else:
            break
        gain = val - current
        beta, current = cand, val
        if gain <= tol * max(1.0, abs(current)):
            break
    return beta


@dataclass
class _Run:
    index: int
    log_likelihood: float
    pi: np.ndarray
    P: np.ndarray
    beta: np.ndarray
    posteriors: np.ndarray
    trace: list[float]
    converged: bool
    degenerate: bool
    reason: str = ""


class _Data:
    def __init__(self, sequences, alphabet, covariates):
        if not sequences:
            raise DataError("no sequences to fit")
        self.S = len(alphabet)
        self.init, trans = sequence_counts(sequences, self.S)
        self.trans = trans.reshape(len(sequences), self.S * self.S)
        Z, self.names = covariate_matrix(sequences, covariates)
        self.X = np.hstack([np.ones((len(sequences), 1)), Z])
        self.n = len(sequences)


def _m_components(data: _Data, w: np.ndarray):
    mass = w.sum(axis=0)
    pi = (w.T @ data.init) / mass[:, None]
    P = row_normalize((w.T @ data.trans).reshape(-1, data.S, data.S))
    return pi, P


def _em_run(data: _Data, K: int, rng: np.random.Generator, index: int,
            tol: float, max_iter: int, check_monotone: bool) -> _Run:
    w = rng.dirichlet(np.ones(K), size=data.n)
    beta = np.zeros((K - 1, data.X.shape[1]))
    trace: list[float] = []
    converged = False
    pi = P = None
    for _ in range(max_iter):
        mass = w.sum(axis=0)
        if np.any(mass <= 1e-300):
            return _Run(index, -math.inf, pi, P, beta, w, trace, False, True, "empty cluster")
        pi, P = _m_components(data, w)
        beta = _beta_newton(data.X, w, beta)
        if not np.all(np.isfinite(beta)):
            return _Run(index, -math.inf, pi, P, beta, w, trace, False, True, "diverging coefficients")
        L = _component_loglik(data.init, data.trans, pi, P)
        a = _log_prior(data.X, beta) + L
        ll_i = logsumexp(a, axis=1)
        ll = float(ll_i.sum())
        if not math.isfinite(ll):
            return _Run(index, -math.inf, pi, P, beta, w, trace, False, True, "non-finite likelihood")
        w = np.exp(a - ll_i[:, None])
        if trace:
            prev = trace[-1]
            if check_monotone and ll < prev - 1e-9 * max(1.0, abs(prev)):
                raise NumericalError(f"EM log-likelihood decreased from {prev!r} to {ll!r}")
            trace.append(ll)
            if (ll - prev) < tol * abs(prev):
                converged = True
                break
        else:
            trace.append(ll)
    degenerate = bool(np.any(w.sum(axis=0) < 1.0))
    return _Run(index, trace[-1], pi, P, beta, w, trace, converged, degenerate,
                "cluster with posterior mass below one sequence" if degenerate else "")


def count_parameters(K: int, d: int, pi: np.ndarray, P: np.ndarray) -> int:
    """Free parameters: logit coefficients plus non-structural-zero probabilities.

    A probability vector with m non-zero entries contributes m - 1 (zero if
    the vector is empty).
    """
    p = (K - 1) * (d + 1)
    for k in range(K):
        p += max(int(np.count_nonzero(pi[k])) - 1, 0)
        for row in P[k]:
            p += max(int(np.count_nonzero(row)) - 1, 0)
    return p


def _make_result(data: _Data, alphabet: Alphabet, K: int, best: _Run, runs: list[_Run]) -> FitResult:
    components = tuple(
        TransitionModel(alphabet, best.pi[k], best.P[k], "stochastic") for k in range(K)
    )
    model = MixtureModel(alphabet, components, best.beta, data.names)
    n_par = count_parameters(K, len(data.names), best.pi, best.P)
    bic = -2.0 * best.log_likelihood + n_par * math.log(data.n)
    n_best = sum(
        1 for r in runs if not r.degenerate and abs(r.log_likelihood - best.log_likelihood) <= 1e-4
    )
    return FitResult(
        model=model,
        log_likelihood=best.log_likelihood,
        bic=bic,
        n_parameters=n_par,
        n_sequences=data.n,
        posteriors=best.posteriors,
        n_restarts=len(runs),
        n_restarts_converged_to_best=n_best,
        n_degenerate=sum(r.degenerate for r in runs),
        trace=best.trace,
        converged=best.converged,
        design=data.X,
        component_loglik=_component_loglik(data.init, data.trans, best.pi, best.P),
    )


def fit_em(sequences: Sequence[StateSequence], alphabet: Alphabet, K: int,
           covariates: Sequence[str] | None = None, restarts: int = 500, seed=None,
           tol: float = 1e-8, max_iter: int = 1000, n_jobs: int = 1,
           check_monotone: bool = True) -> FitResult:
    """Fit a K-component mixture Markov model by multi-restart EM.

    Each restart starts from Dirichlet(1) responsibilities and gets its own
    child seed of ``seed``, so results do not depend on ``n_jobs``. The best
    non-degenerate restart (ties: lowest restart index) is returned.
    Raises FitFailedError when every restart is degenerate.
    """
    if K < 1:
        raise ConfigError("K must be at least 1")
    if restarts < 1:
        raise ConfigError("need at least one restart")
    data = _Data(sequences, alphabet, covariates)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(restarts)

    def work(i):
        return _em_run(data, K, np.random.default_rng(children[i]), i, tol, max_iter, check_monotone)

    if n_jobs > 1 and restarts > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            runs = list(pool.map(work, range(restarts)))
    else:
        runs = [work(i) for i in range(restarts)]

    good = [r for r in runs if not r.degenerate]
    if not good:
        raise FitFailedError(f"K={K}: failed (all {restarts} restarts degenerate)")
    best = max(good, key=lambda r: (r.log_likelihood, -r.index))
    log.debug("K=%d best logL %.6f from restart %d", K, best.log_likelihood, best.index)
    return _make_result(data, alphabet, K, best, runs)


@dataclass(frozen=True)
class BicRow:
    K: int
    status: str
    bic: float | None = None
    log_likelihood: float | None = None
    n_parameters: int | None = None
    n_restarts_converged_to_best: int | None = None


def select_k(sequences: Sequence[StateSequence], alphabet: Alphabet,
             k_range: Sequence[int] = range(2, 9), covariates: Sequence[str] | None = None,
             restarts: int = 500, seed=None, **kwargs) -> tuple[FitResult, list[BicRow]]:
    """Fit every K in ``k_range`` and keep the fit with the lowest BIC."""
    ks = list(k_range)
    if not ks:
        raise ConfigError("k_range is empty")
    table: list[BicRow] = []
    fits: dict[int, FitResult] = {}
    seeds = np.random.SeedSequence(seed).spawn(len(ks))
    for K, child in zip(ks, seeds):
        try:
            res = fit_em(sequences, alphabet, K, covariates, restarts=restarts,
                         seed=child, **kwargs)
        except FitFailedError:
            table.append(BicRow(K, "failed"))
            continue
        fits[K] = res
        table.append(BicRow(K, "ok", res.bic, res.log_likelihood, res.n_parameters,
                            res.n_restarts_converged_to_best))
    if not fits:
        raise FitFailedError(f"every K in {ks} failed")
    best_k = min(fits, key=lambda k: (fits[k].bic, k))
    return fits[best_k], table


def mixture_log_likelihood(model: MixtureModel, sequences: Sequence[StateSequence]) -> float:
    data = _Data(sequences, model.alphabet, model.covariate_names or None)
    pi = np.array([c.initial for c in model.components])
    P = np.array([c.matrix for c in model.components])
    L = _component_loglik(data.init, data.trans, pi, P)
    return float(logsumexp(_log_prior(data.X, model.beta) + L, axis=1).sum())


def posteriors(model: MixtureModel, sequences: Sequence[StateSequence]) -> np.ndarray:
    data = _Data(sequences, model.alphabet, model.covariate_names or None)
    pi = np.array([c.initial for c in model.components])
    P = np.array([c.matrix for c in model.components])
    a = _log_prior(data.X, model.beta) + _component_loglik(data.init, data.trans, pi, P)
    return np.exp(a - logsumexp(a, axis=1, keepdims=True))


@dataclass(frozen=True)
class CovariateRow:
    cluster: str
    variable: str
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    t: float
    p: float


def _beta_gradient(X: np.ndarray, L: np.ndarray, beta_free: np.ndarray) -> np.ndarray:
    """Analytic gradient of the observed log-likelihood in the free coefficients."""
    log_prior = _log_prior(X, beta_free)
    a = log_prior + L
    post = np.exp(a - logsumexp(a, axis=1, keepdims=True))
    return ((post[:, 1:] - np.exp(log_prior[:, 1:])).T @ X).ravel()


def covariate_inference(fit: FitResult, z_crit: float = 1.959963984540054) -> list[CovariateRow]:
    """Wald table for the logit coefficients (reference cluster omitted).

    Standard errors come from the inverse observed information in the
    coefficients, with component parameters held at their estimates. The
    Hessian is taken by central differences of the analytic gradient with
    step 1e-5 * max(1, |beta|).
    """
    if fit.K < 2:
        raise DataError("covariate inference needs at least two clusters")
    names = fit.model.covariate_names
    if not names:
        raise DataError("the fit has no covariates")
    X, L = fit.design, fit.component_loglik
    beta = fit.model.beta.copy()
    flat = beta.ravel()
    m = flat.size
    H = np.zeros((m, m))
    for j in range(m):
        h = 1e-5 * max(1.0, abs(flat[j]))
        up, dn = flat.copy(), flat.copy()
        up[j] += h
        dn[j] -= h
        H[:, j] = (_beta_gradient(X, L, up.reshape(beta.shape))
                   - _beta_gradient(X, L, dn.reshape(beta.shape))) / (2 * h)
    info = -(H + H.T) / 2
    eig = np.linalg.eigvalsh(info) if np.all(np.isfinite(info)) else np.array([-1.0])
    log.debug("information eigenvalues: %s", eig)
    if eig.min() <= 1e-6 * fit.n_sequences:
        raise NumericalError(
            "observed information for the covariate coefficients is singular; "
            "use fewer covariates or more data"
        )
    cov = np.linalg.inv(info)
    se = np.sqrt(np.diag(cov)).reshape(beta.shape)
    variables = (INTERCEPT, *names)
    labels = fit.cluster_labels()
    rows = []
    for k in range(beta.shape[0]):
        for j, var in enumerate(variables):
            est, s = float(beta[k, j]), float(se[k, j])
            t = est / s
            rows.append(CovariateRow(labels[k + 1], var, est, s, est - z_crit * s, est + z_crit * s,
                                     t, float(2 * norm.sf(abs(t)))))
    return rows


def cluster_networks(fit: FitResult) -> list[TransitionNetwork]:
    return [TransitionNetwork(c) for c in fit.model.components]

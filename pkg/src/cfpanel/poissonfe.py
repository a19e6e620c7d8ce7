"""Fixed-effects Poisson by conditional maximum likelihood.

Conditioning on each entity's outcome total turns the Poisson panel into a
multinomial over periods, with shares ``p_it = exp(x_it b) / sum_s exp(x_is b)``.
The multiplicative entity effects drop out, and the estimator is consistent
as a quasi-MLE whenever the conditional mean is correctly specified.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg, stats
from scipy.special import logsumexp

from .errors import ConvergenceError, NumericalError, PanelDataError, SeparationError
from .linfe import _cluster_codes, check_rank, cluster_scores
from .panel import Panel

logger = logging.getLogger(__name__)

MAX_ITER = 100
GRAD_TOL = 1e-8
STEP_TOL = 1e-10
SEPARATION_BOUND = 50.0
SEPARATION_MU = 1e-10


def conditional_loglik(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    """Conditional (multinomial) log-likelihood, ``X`` is ``(N, T, k)``."""
    eta = X @ beta
    logp = eta - logsumexp(eta, axis=1, keepdims=True)
    return float(np.sum(y * logp))


def _shares(X, beta):
    eta = X @ beta
    return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))


def _derivatives(X, y, totals, beta):
    p = _shares(X, beta)
    eta = X @ beta
    ll = float(np.sum(y * (eta - logsumexp(eta, axis=1, keepdims=True))))
    resid = y - totals[:, None] * p
    g = np.einsum("it,itk->k", resid, X)
    xbar = np.einsum("it,itk->ik", p, X)
    xc = X - xbar[:, None, :]
    H = -np.einsum("i,it,itk,itl->kl", totals, p, xc, xc)
    return ll, g, 0.5 * (H + H.T), p


@dataclass
class FEPoissonFit:
    """Result of :func:`fit_fe_poisson`; arrays are ``(N, T[, k])``."""

    outcome: str
    names: list
    params: np.ndarray
    X: np.ndarray
    y: np.ndarray
    totals: np.ndarray
    shares: np.ndarray
    score: np.ndarray
    hessian: np.ndarray
    loglik: float
    iterations: int
    grad_norm: float
    entities: tuple
    times: tuple
    cluster: np.ndarray
    converged: bool = True
    trace: list = field(default_factory=list)

    @property
    def nobs(self) -> int:
        return int(self.y.size)

    @property
    def n_entities(self) -> int:
        return self.y.shape[0]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"{name!r} is not an estimated coefficient") from None

    def obs_scores(self) -> np.ndarray:
        """Per-observation score contributions, ``(N*T, k)``."""
        r = self.y - self.totals[:, None] * self.shares
        return (r[:, :, None] * self.X).reshape(-1, self.X.shape[2])

    def naive_cov(self) -> np.ndarray:
        """Inverse of the observed information."""
        return _inv_information(self.hessian)

    def to_dict(self, cov: np.ndarray | None = None) -> dict:
        out = {
            "outcome": self.outcome,
            "coefficients": dict(zip(self.names, map(float, self.params))),
            "loglik": float(self.loglik),
            "nobs": self.nobs,
            "n_entities": self.n_entities,
            "n_clusters": int(len(np.unique(self.cluster))),
            "periods": [self.times[0], self.times[-1]],
            "converged": bool(self.converged),
            "iterations": self.iterations,
            "grad_norm": float(self.grad_norm),
            "trace": [dict(t) for t in self.trace],
        }
        if cov is not None:
            out["std_errors"] = dict(zip(self.names, map(float, np.sqrt(np.diag(cov)))))
        return out


def _inv_information(H):
    A = -H
    try:
        c = linalg.cho_factor(A)
    except linalg.LinAlgError:
        raise NumericalError("Hessian is singular or not negative definite") from None
    Ainv = linalg.cho_solve(c, np.eye(A.shape[0]))
    return 0.5 * (Ainv + Ainv.T)


def newton_conditional(
    X: np.ndarray,
    y: np.ndarray,
    max_iter: int = MAX_ITER,
    grad_tol: float = GRAD_TOL,
    step_tol: float = STEP_TOL,
):
    """Maximize :func:`conditional_loglik` by Newton-Raphson with step halving.

    Returns ``(beta, ll, g, H, p, iterations, trace)``.  Convergence needs both
    ``|g| / sum(y) <= grad_tol`` and a relative step below ``step_tol``.
    """
    k = X.shape[2]
    totals = y.sum(axis=1)
    beta = np.zeros(k)
    ll, g, H, p = _derivatives(X, y, totals, beta)
    scale = max(1.0, float(totals.sum()))
    trace = []
    for it in range(1, max_iter + 1):
        try:
            step = linalg.solve(-H, g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise NumericalError("Hessian became singular during Newton iterations") from None
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            ll_c, g_c, H_c, p_c = _derivatives(X, y, totals, cand)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise ConvergenceError("line search failed to improve the likelihood", trace)
        rel_step = float(np.linalg.norm(cand - beta) / (1.0 + np.linalg.norm(beta)))
        beta, ll, g, H, p = cand, ll_c, g_c, H_c, p_c
        gnorm = float(np.linalg.norm(g))
        trace.append({"iter": it, "loglik": ll, "grad_norm": gnorm, "step": t, "rel_step": rel_step})
        if np.abs(beta).max() > SEPARATION_BOUND and float(g @ step) > 0:
            raise SeparationError(
                "unbounded likelihood direction: coefficients "
                f"{np.flatnonzero(np.abs(beta) > SEPARATION_BOUND).tolist()} diverge"
            )
        if gnorm / scale <= grad_tol and (rel_step <= step_tol or gnorm <= 1e-12 * scale):
            # a vanishing gradient can also mean beta drifted along a separating
            # direction: zero-count cells whose fitted mean has collapsed
            mu = totals[:, None] * p
            if (mu[y == 0] < SEPARATION_MU).any():
                raise SeparationError("fitted means of zero-count cells collapsed to zero (separation)")
            return beta, ll, g, H, p, it, trace
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations", trace)


def fit_fe_poisson(
    panel: Panel,
    outcome: str,
    regressors: Sequence[str],
    year_dummies: bool = False,
    max_iter: int = MAX_ITER,
) -> FEPoissonFit:
    """Conditional-ML fixed-effects Poisson regression.

    Parameters
    ----------
    panel : Panel
        Every entity must have a positive outcome total over the sample; use
        :func:`cfpanel.panel.filter_nonzero_outcome` beforehand.
    outcome : str
        Nonnegative integer counts.
    regressors : sequence of str
        Must vary within entities.
    year_dummies : bool
        Append ``T-1`` period indicators.

    Raises
    ------
    CollinearityError
        A regressor is constant within entities or regressors are collinear.
    SeparationError
        A coefficient diverges (perfect within-entity ordering of counts).
    ConvergenceError
        Newton iterations exhausted.
    """
    regressors = list(regressors)
    sample = panel.complete_window([outcome, *regressors])
    names = list(regressors)
    cols = [sample[n] for n in names]
    if year_dummies:
        dums = sample.year_dummies()
        names += list(dums)
        cols += list(dums.values())
    if not names:
        raise ValueError("at least one regressor is required")
    y = np.array(sample[outcome])
    if (y < 0).any() or not np.all(y == np.round(y)):
        raise PanelDataError(f"outcome {outcome!r} must be nonnegative integer counts")
    totals = y.sum(axis=1)
    if (totals <= 0).any():
        bad = [e for e, s in zip(sample.entities, totals) if s <= 0]
        raise PanelDataError(
            f"entities with zero outcome total (apply filter_nonzero_outcome): {bad[:5]}"
        )
    X = np.stack(cols, axis=2)
    Xc = X - X.mean(axis=1, keepdims=True)
    check_rank(Xc.reshape(-1, len(names)), names)

    beta, ll, g, H, p, it, trace = newton_conditional(Xc, y, max_iter=max_iter)
    logger.debug("FE Poisson converged in %d iterations, |g|=%.3g", it, np.linalg.norm(g))
    return FEPoissonFit(
        outcome=outcome,
        names=names,
        params=beta,
        X=Xc,
        y=y,
        totals=totals,
        shares=p,
        score=g,
        hessian=H,
        loglik=ll,
        iterations=it,
        grad_norm=float(np.linalg.norm(g)),
        entities=sample.entities,
        times=sample.times,
        cluster=sample.cluster_index(),
        trace=trace,
    )


def poisson_cluster_cov(fit: FEPoissonFit, clusters=None) -> np.ndarray:
    """Sandwich ``A^-1 B A^-1`` with ``A = -H`` and cluster-summed scores in ``B``."""
    if not fit.converged:
        raise NumericalError("covariance requested for a non-converged fit")
    Ainv = _inv_information(fit.hessian)
    codes = _cluster_codes(fit, clusters)
    s = cluster_scores(fit.obs_scores(), codes)
    V = Ainv @ (s.T @ s) @ Ainv
    return 0.5 * (V + V.T)


class WaldResult(NamedTuple):
    statistic: float
    pvalue: float
    df: int = 1


def wald_test(fit, cov: np.ndarray, coefficient: str, h0: float = 0.0) -> WaldResult:
    """Chi-square(1) Wald test of a single coefficient against ``h0``."""
    j = fit.index(coefficient)
    var = float(cov[j, j])
    if not var > 0:
        raise NumericalError(f"variance of {coefficient!r} is not positive")
    W = (float(fit.params[j]) - h0) ** 2 / var
    return WaldResult(W, float(stats.chi2.sf(W, 1)))

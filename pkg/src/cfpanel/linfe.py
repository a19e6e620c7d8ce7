"""Within (entity fixed-effects) least squares and its inference.

The within estimator regresses entity-demeaned outcomes on entity-demeaned
regressors, which reproduces the least-squares dummy-variable (LSDV)
coefficients without forming the ``N`` dummy columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg, stats

from .errors import CollinearityError, NumericalError
from .panel import Panel, within_demean

RANK_TOL = 1e-10

CONVENTIONS = {
    "df_resid": "n - k - n_entities",
    "cluster_factor": "G/(G-1) * (n-1)/(n-k)",
    "f_test_df": "(q, G-1)",
    "rank_tol": RANK_TOL,
}


@dataclass
class FEOLSFit:
    """Result of :func:`fit_within_ols`.

    ``X`` and ``resid`` are the demeaned regressor matrix and the
    fixed-effects residuals in stacked entity-major order over the sample
    ``entities`` x ``times``.
    """

    dependent: str
    names: list
    params: np.ndarray
    resid: np.ndarray
    X: np.ndarray
    y: np.ndarray
    x_means: np.ndarray
    y_means: np.ndarray
    entity: np.ndarray
    cluster: np.ndarray
    entities: tuple
    times: tuple
    xtx_inv: np.ndarray
    df_resid: int
    sigma2: float
    dropped: list = field(default_factory=list)

    @property
    def nobs(self) -> int:
        return self.resid.shape[0]

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_clusters(self) -> int:
        return len(np.unique(self.cluster))

    @property
    def fitted(self) -> np.ndarray:
        """In-sample fitted values including the entity-mean component."""
        return self.y - self.resid

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"{name!r} is not an estimated coefficient") from None

    def resid_panel(self) -> np.ndarray:
        return self.resid.reshape(self.n_entities, len(self.times))

    def classical_cov(self) -> np.ndarray:
        return self.sigma2 * self.xtx_inv

    def to_dict(self, cov: np.ndarray | None = None) -> dict:
        out = {
            "dependent": self.dependent,
            "coefficients": dict(zip(self.names, map(float, self.params))),
            "nobs": self.nobs,
            "n_entities": self.n_entities,
            "n_clusters": self.n_clusters,
            "df_resid": self.df_resid,
            "sigma2": float(self.sigma2),
            "periods": [self.times[0], self.times[-1]],
            "dropped_absorbed": list(self.dropped),
            "conventions": dict(CONVENTIONS),
        }
        if cov is not None:
            out["std_errors"] = dict(zip(self.names, map(float, np.sqrt(np.diag(cov)))))
        return out


def _collinear_set(X: np.ndarray, names: Sequence[str]) -> list[str]:
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    _, _, vt = np.linalg.svd(X / scale, full_matrices=False)
    v = vt[-1]
    return [n for n, c in zip(names, v) if abs(c) > 1e-6 * np.abs(v).max()]


def check_rank(X: np.ndarray, names: Sequence[str], tol: float = RANK_TOL) -> None:
    """Raise :class:`CollinearityError` if ``X'X`` is numerically singular."""
    if X.shape[1] == 0:
        return
    xtx = X.T @ X
    _, r, _ = linalg.qr(xtx, pivoting=True)
    d = np.abs(np.diag(r))
    if d[0] == 0 or (d < tol * d[0]).any():
        cols = _collinear_set(X, names)
        raise CollinearityError(f"regressors are collinear after demeaning: {cols}", cols)


def fit_within_ols(
    panel: Panel,
    dependent: str,
    regressors: Sequence[str],
    year_dummies: bool = False,
    drop_absorbed: bool = True,
) -> FEOLSFit:
    """Entity fixed-effects OLS by the within transformation.

    Parameters
    ----------
    panel : Panel
    dependent : str
        Dependent column; lag prefixes (``L1.x``) are allowed everywhere.
    regressors : sequence of str
    year_dummies : bool
        Append ``T-1`` period indicators (first sample period is the base).
    drop_absorbed : bool
        Drop regressors that are constant within every entity instead of
        raising.  Other collinearity always raises.

    Notes
    -----
    Edge periods in which a lagged or derived column is absent are removed
    for all entities, so the estimation sample stays balanced.
    """
    regressors = list(regressors)
    sample = panel.complete_window([dependent, *regressors])
    names = list(regressors)
    cols = {n: sample[n] for n in names}
    if year_dummies:
        dums = sample.year_dummies()
        cols.update(dums)
        names += list(dums)
    if not names:
        raise ValueError("at least one regressor is required")
    entity = sample.entity_index()
    Xraw = np.column_stack([cols[n].reshape(-1) for n in names])
    yraw = sample[dependent].reshape(-1)
    X = within_demean(Xraw, entity)
    y = within_demean(yraw, entity)

    scale = np.maximum(np.abs(Xraw).max(axis=0), 1.0)
    absorbed = np.abs(X).max(axis=0) <= 1e-12 * scale
    dropped = [n for n, a in zip(names, absorbed) if a]
    if dropped:
        if not drop_absorbed:
            raise CollinearityError(f"regressors constant within every entity: {dropped}", dropped)
        keep = ~absorbed
        names = [n for n, k in zip(names, keep) if k]
        X, Xraw = X[:, keep], Xraw[:, keep]
        if not names:
            raise CollinearityError("every regressor is absorbed by the entity effects", dropped)
    check_rank(X, names)

    params, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ params
    n, k = X.shape
    df_resid = n - k - sample.n_entities
    if df_resid <= 0:
        raise NumericalError(f"no residual degrees of freedom (n={n}, k={k}, N={sample.n_entities})")
    xtx_inv = linalg.inv(X.T @ X)
    xtx_inv = 0.5 * (xtx_inv + xtx_inv.T)
    N, T = sample.n_entities, sample.n_times
    return FEOLSFit(
        dependent=dependent,
        names=names,
        params=params,
        resid=resid,
        X=X,
        y=yraw,
        x_means=Xraw.reshape(N, T, k).mean(axis=1),
        y_means=yraw.reshape(N, T).mean(axis=1),
        entity=entity,
        cluster=sample.cluster_index(),
        entities=sample.entities,
        times=sample.times,
        xtx_inv=xtx_inv,
        df_resid=df_resid,
        sigma2=float(resid @ resid / df_resid),
        dropped=dropped,
    )


def _cluster_codes(fit, clusters) -> np.ndarray:
    if clusters is None:
        return fit.cluster
    clusters = np.asarray(clusters)
    if clusters.shape[0] == fit.n_entities and fit.n_entities != fit.nobs:
        clusters = np.repeat(clusters, len(fit.times))
    if clusters.shape[0] != fit.nobs:
        raise ValueError("clusters must be given per entity or per observation")
    return np.unique(clusters, return_inverse=True)[1]


def cluster_scores(scores: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Sum per-observation score rows within clusters, ``(G, k)``."""
    G = codes.max() + 1
    out = np.zeros((G, scores.shape[1]))
    np.add.at(out, codes, scores)
    return out


def cluster_robust_cov(fit: FEOLSFit, clusters=None, small_sample: bool = True) -> np.ndarray:
    """Cluster-robust sandwich covariance of the within coefficients.

    ``clusters`` may be per entity or per observation; defaults to the panel's
    cluster labels.  With ``small_sample`` the meat is scaled by
    ``G/(G-1) * (n-1)/(n-k)``.
    """
    codes = _cluster_codes(fit, clusters)
    G = int(codes.max()) + 1
    if G < 2:
        raise NumericalError("cluster-robust covariance needs at least two clusters")
    s = cluster_scores(fit.X * fit.resid[:, None], codes)
    meat = s.T @ s
    n, k = fit.X.shape
    if small_sample:
        meat *= G / (G - 1) * (n - 1) / (n - k)
    V = fit.xtx_inv @ meat @ fit.xtx_inv
    return 0.5 * (V + V.T)


class FTestResult(NamedTuple):
    statistic: float
    pvalue: float
    df_num: int
    df_denom: int


def instrument_f_stat(
    fit: FEOLSFit, cov: np.ndarray, instruments: Sequence[str], df_denom: int | None = None
) -> FTestResult:
    """Wald-form F test that the listed coefficients are jointly zero.

    The p-value uses ``F(q, G-1)`` with ``G`` the number of clusters unless
    ``df_denom`` is given.
    """
    idx = [fit.index(n) for n in instruments]
    q = len(idx)
    if q == 0:
        raise ValueError("no instruments to test")
    b = fit.params[idx]
    Vr = cov[np.ix_(idx, idx)]
    try:
        c = linalg.cho_factor(Vr)
    except linalg.LinAlgError:
        raise NumericalError(f"restricted covariance of {list(instruments)} is singular") from None
    F = float(b @ linalg.cho_solve(c, b)) / q
    dfd = fit.n_clusters - 1 if df_denom is None else int(df_denom)
    return FTestResult(F, float(stats.f.sf(F, q, dfd)), q, dfd)

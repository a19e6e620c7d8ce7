"""Linear dynamic panels by one- and two-step system GMM.

The stacked system holds, per entity, the first-differenced equation and the
levels equation for periods ``j = 2..T-1`` (0-based).  Lagged levels of the
dependent variable instrument the differenced equation, lagged differences
instrument the levels equation, and strictly exogenous regressors (year
dummies included) serve as their own instruments: differenced in the
differenced equation, in levels in the levels equation.

Two-step standard errors are the plain ``(X'Z W2 Z'X)^-1`` without a finite
sample correction; reports flag them as ``uncorrected``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg, stats

from .errors import ConfigError, NumericalError
from .panel import Panel

SINGULAR_TOL = 1e-12


@dataclass
class GMMSpec:
    """Model and instrument choices for :func:`fit_system_gmm`.

    ``endogenous`` regressors enter contemporaneously and get the same
    GMM-style lag instruments as the dependent variable.
    ``extra_instruments`` are excluded IV-style instruments.
    ``collapse=None`` collapses automatically when the uncollapsed count
    would exceed half the number of entities.
    """

    dep: str
    exog: list = field(default_factory=list)
    endogenous: list = field(default_factory=list)
    extra_instruments: list = field(default_factory=list)
    lag_min: int = 2
    lag_max: int | None = None
    collapse: bool | None = None
    year_dummies: bool = True
    constant: bool = True
    system: bool = True

    @classmethod
    def from_dict(cls, d) -> "GMMSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown GMM options: {sorted(unknown)}")
        if "dep" not in d:
            raise ConfigError("GMM spec needs 'dep'")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class InstrumentBlocks:
    """GMM-style instrument columns, ``(N, T-2, L)`` per equation."""

    diff: np.ndarray
    level: np.ndarray
    diff_names: list
    level_names: list
    lag_min: int
    lag_max: int
    collapse: bool

    @property
    def count(self) -> int:
        return self.diff.shape[2] + self.level.shape[2]


def _lag_window(T: int, lag_min: int, lag_max: int | None) -> tuple[int, int]:
    if lag_min < 2:
        raise ConfigError("lag_min must be at least 2 for the differenced equation")
    if lag_min > T - 1:
        raise ConfigError(f"lag window empty: lag_min={lag_min} exceeds T-1={T - 1}")
    if lag_max is None:
        lag_max = T - 1
    if lag_max > T - 1:
        raise ConfigError(f"lag_max={lag_max} exceeds T-1={T - 1}")
    if lag_max < lag_min:
        raise ConfigError(f"lag window empty: lag_max={lag_max} < lag_min={lag_min}")
    return lag_min, lag_max


def _gmm_block(v: np.ndarray, name: str, lag_min: int, lag_max: int, collapse: bool, system: bool):
    """Instrument columns for one variable ``v`` of shape ``(N, T)``."""
    N, T = v.shape
    rows = range(2, T)
    R = T - 2
    d_cols, d_names = [], []
    if collapse:
        for lag in range(lag_min, lag_max + 1):
            col = np.zeros((N, R))
            for r, j in enumerate(rows):
                if j - lag >= 0:
                    col[:, r] = v[:, j - lag]
            d_cols.append(col)
            d_names.append(f"D:L{lag}.{name}")
    else:
        for r, j in enumerate(rows):
            for lag in range(lag_min, lag_max + 1):
                if j - lag >= 0:
                    col = np.zeros((N, R))
                    col[:, r] = v[:, j - lag]
                    d_cols.append(col)
                    d_names.append(f"D:L{lag}.{name}@{j}")
    l_cols, l_names = [], []
    if system:
        lag = lag_min - 1
        dv = np.full((N, T), np.nan)
        dv[:, 1:] = np.diff(v, axis=1)
        if collapse:
            col = np.zeros((N, R))
            for r, j in enumerate(rows):
                if j - lag >= 1:
                    col[:, r] = dv[:, j - lag]
            l_cols.append(col)
            l_names.append(f"L:L{lag}.D.{name}")
        else:
            for r, j in enumerate(rows):
                if j - lag >= 1:
                    col = np.zeros((N, R))
                    col[:, r] = dv[:, j - lag]
                    l_cols.append(col)
                    l_names.append(f"L:L{lag}.D.{name}@{j}")
    stack = lambda cols: np.stack(cols, axis=2) if cols else np.zeros((N, R, 0))
    return stack(d_cols), stack(l_cols), d_names, l_names


def build_gmm_instruments(
    panel: Panel,
    dep: str | Sequence[str],
    lag_min: int = 2,
    lag_max: int | None = None,
    collapse: bool = False,
    system: bool = True,
) -> InstrumentBlocks:
    """GMM-style instruments: lagged levels for the differenced equation and
    lagged differences for the levels equation.

    ``dep`` may be one column or several (endogenous regressors share the
    construction).  Uncollapsed blocks get one column per (period, lag)
    pair; collapsed blocks one column per lag.
    """
    names = [dep] if isinstance(dep, str) else list(dep)
    T = panel.n_times
    lag_min, lag_max = _lag_window(T, lag_min, lag_max)
    parts = [_gmm_block(panel[n], n, lag_min, lag_max, collapse, system) for n in names]
    return InstrumentBlocks(
        diff=np.concatenate([p[0] for p in parts], axis=2),
        level=np.concatenate([p[1] for p in parts], axis=2),
        diff_names=[s for p in parts for s in p[2]],
        level_names=[s for p in parts for s in p[3]],
        lag_min=lag_min,
        lag_max=lag_max,
        collapse=collapse,
    )


@dataclass
class GMMData:
    """Stacked per-entity system: rows are ``n_diff`` differenced then level equations."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    H: np.ndarray
    names: list
    inst_names: list
    n_diff: int
    level_design: np.ndarray
    level_dep: np.ndarray
    entities: tuple
    times: tuple
    blocks: InstrumentBlocks | None = None


def _year_dummy_levels(T: int) -> tuple[np.ndarray, list]:
    """Indicators for periods 3..T-1 (0-based) over periods 1..T-1; base is period 2."""
    cols, names = [], []
    for j in range(3, T):
        d = np.zeros(T - 1)
        d[j - 1] = 1.0
        cols.append(d)
        names.append(j)
    return (np.stack(cols, axis=1) if cols else np.zeros((T - 1, 0))), names


def build_system(panel: Panel, spec: GMMSpec) -> GMMData:
    """Assemble the stacked system for :func:`estimate_gmm`."""
    cols = [spec.dep, *spec.exog, *spec.endogenous, *spec.extra_instruments]
    if len(set(cols)) != len(cols):
        raise ConfigError("GMM variable lists overlap")
    for c in cols:
        if c not in panel:
            raise ConfigError(f"unknown column {c!r} in GMM spec")
    sample = panel.complete_window(cols)
    N, T = sample.n_entities, sample.n_times
    if T < 4:
        raise ConfigError("system GMM needs at least 4 periods")
    collapse = spec.collapse
    if collapse is None:
        trial = build_gmm_instruments(sample, [spec.dep, *spec.endogenous], spec.lag_min, spec.lag_max,
                                      False, spec.system)
        collapse = trial.count > N / 2
    blocks = build_gmm_instruments(sample, [spec.dep, *spec.endogenous], spec.lag_min, spec.lag_max,
                                   collapse, spec.system)

    y = sample[spec.dep]
    # level-equation design over periods 1..T-1
    lv = [y[:, :-1]] + [sample[n][:, 1:] for n in [*spec.exog, *spec.endogenous]]
    names = [f"L1.{spec.dep}", *spec.exog, *spec.endogenous]
    iv = [sample[n][:, 1:] for n in [*spec.exog, *spec.extra_instruments]]
    iv_names = [*spec.exog, *spec.extra_instruments]
    if spec.year_dummies:
        D, years = _year_dummy_levels(T)
        for k, j in enumerate(years):
            lv.append(np.broadcast_to(D[:, k], (N, T - 1)))
            iv.append(np.broadcast_to(D[:, k], (N, T - 1)))
            names.append(f"year_{sample.times[j]}")
            iv_names.append(f"year_{sample.times[j]}")
    if spec.constant and spec.system:
        lv.append(np.ones((N, T - 1)))
        iv.append(np.ones((N, T - 1)))
        names.append("const")
        iv_names.append("const")
    L = np.stack(lv, axis=2)
    IV = np.stack(iv, axis=2) if iv else np.zeros((N, T - 1, 0))
    ylev = y[:, 1:]

    Xd, yd, IVd = np.diff(L, axis=1), np.diff(ylev, axis=1), np.diff(IV, axis=1)
    R = T - 2
    if spec.system:
        X = np.concatenate([Xd, L[:, 1:]], axis=1)
        yy = np.concatenate([yd, ylev[:, 1:]], axis=1)
        ivz = np.concatenate([IVd, IV[:, 1:]], axis=1)
        gd = np.concatenate([blocks.diff, np.zeros((N, R, blocks.diff.shape[2]))], axis=1)
        gl = np.concatenate([np.zeros((N, R, blocks.level.shape[2])), blocks.level], axis=1)
        Z = np.concatenate([gd, gl, ivz], axis=2)
        inst_names = blocks.diff_names + blocks.level_names + [f"IV:{n}" for n in iv_names]
        H = linalg.block_diag(_h_diff(R), np.eye(R))
    else:
        X, yy = Xd, yd
        Z = np.concatenate([blocks.diff, IVd], axis=2)
        inst_names = blocks.diff_names + [f"IV:D.{n}" for n in iv_names]
        H = _h_diff(R)
    # drop all-zero instrument columns (e.g. differenced base-period dummies)
    live = np.abs(Z).reshape(-1, Z.shape[2]).max(axis=0) > 0
    Z = Z[:, :, live]
    inst_names = [n for n, k in zip(inst_names, live) if k]
    if Z.shape[2] > N:
        warnings.warn(f"{Z.shape[2]} instruments exceed {N} entities; consider collapse", stacklevel=2)
    return GMMData(yy, X, Z, H, names, inst_names, R, L, ylev, sample.entities, sample.times, blocks)


def _h_diff(R: int) -> np.ndarray:
    return 2 * np.eye(R) - np.eye(R, k=1) - np.eye(R, k=-1)


def _inv_psd(A: np.ndarray, what: str) -> np.ndarray:
    A = 0.5 * (A + A.T)
    w = np.linalg.eigvalsh(A)
    if w[-1] <= 0 or w[0] <= SINGULAR_TOL * w[-1]:
        raise NumericalError(f"singular {what}; reduce instruments (collapse) or lag depth")
    Ainv = linalg.inv(A)
    return 0.5 * (Ainv + Ainv.T)


@dataclass
class GMMFit:
    names: list
    params: np.ndarray
    cov: np.ndarray
    step: str
    W: np.ndarray
    S: np.ndarray
    params_one: np.ndarray
    params_two: np.ndarray | None
    W_two: np.ndarray | None
    resid: np.ndarray
    data: GMMData
    windmeijer: str = "uncorrected"

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def n_instruments(self) -> int:
        return self.data.Z.shape[2]

    @property
    def n_params(self) -> int:
        return len(self.names)

    @property
    def n_entities(self) -> int:
        return self.data.y.shape[0]

    @property
    def diff_resid(self) -> np.ndarray:
        return self.resid[:, : self.data.n_diff]

    def level_resid(self) -> np.ndarray:
        """Level residuals for periods 1..T-1, including the fitted constant."""
        return self.data.level_dep - self.data.level_design @ self.params

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"{name!r} is not an estimated coefficient") from None

    def to_dict(self) -> dict:
        b = self.data.blocks
        return {
            "step": self.step,
            "coefficients": dict(zip(self.names, map(float, self.params))),
            "std_errors": dict(zip(self.names, map(float, self.std_errors))),
            "se_type": "robust one-step" if self.step == "one" else "two-step, uncorrected",
            "n_entities": self.n_entities,
            "periods": [self.data.times[0], self.data.times[-1]],
            "n_instruments": self.n_instruments,
            "n_params": self.n_params,
            "instruments": {
                "lag_min": b.lag_min if b else None,
                "lag_max": b.lag_max if b else None,
                "collapse": b.collapse if b else None,
            },
        }


def _solve_gmm(XZ, Zy, W):
    A = XZ @ W @ XZ.T
    try:
        Ainv = linalg.inv(0.5 * (A + A.T))
    except linalg.LinAlgError:
        raise NumericalError("GMM normal equations are singular") from None
    return Ainv @ (XZ @ W @ Zy), Ainv


def estimate_gmm(data: GMMData, step: str = "one") -> GMMFit:
    """One- or two-step GMM on a stacked system.

    One step weights with ``(sum_i Z_i' H Z_i)^-1``; two step re-weights with
    the inverse of the clustered moment covariance of the one-step residuals.
    """
    if step not in ("one", "two"):
        raise ConfigError("step must be 'one' or 'two'")
    y, X, Z = data.y, data.X, data.Z
    k, L = X.shape[2], Z.shape[2]
    if L < k:
        raise ConfigError(f"underidentified: {L} instruments for {k} parameters")
    XZ = np.einsum("irk,irl->kl", X, Z)
    Zy = np.einsum("irl,ir->l", Z, y)
    W1 = _inv_psd(np.einsum("irl,rs,ism->lm", Z, data.H, Z), "one-step weighting matrix")
    b1, A1 = _solve_gmm(XZ, Zy, W1)
    u1 = y - X @ b1
    g1 = np.einsum("irl,ir->il", Z, u1)
    S = g1.T @ g1
    try:
        W2 = _inv_psd(S, "moment covariance (two-step weighting matrix)")
        b2, A2 = _solve_gmm(XZ, Zy, W2)
    except NumericalError:
        if step == "two":
            raise
        # one-step estimates stay usable; only J and two-step need W2
        W2 = b2 = A2 = None
    if step == "one":
        M = A1 @ XZ @ W1
        cov = M @ S @ M.T
        params, W, resid = b1, W1, u1
    else:
        cov = A2
        params, W, resid = b2, W2, y - X @ b2
    return GMMFit(
        names=list(data.names),
        params=params,
        cov=0.5 * (cov + cov.T),
        step=step,
        W=W,
        S=S,
        params_one=b1,
        params_two=b2,
        W_two=W2,
        resid=resid,
        data=data,
    )


def fit_system_gmm(panel: Panel, spec: GMMSpec, step: str = "one") -> GMMFit:
    """System (or, with ``spec.system=False``, difference) GMM for a dynamic panel."""
    return estimate_gmm(build_system(panel, spec), step)


class HansenResult(NamedTuple):
    statistic: float
    df: int
    pvalue: float


def hansen_j(fit: GMMFit) -> HansenResult:
    """Hansen overidentification statistic at the two-step estimate.

    ``J = g' S^-1 g`` with ``g = sum_i Z_i' u_i`` from the two-step residuals
    and ``S`` the clustered moment covariance of the one-step residuals
    (equivalently ``N gbar' W gbar`` with per-entity averages).
    """
    df = fit.n_instruments - fit.n_params
    if df <= 0:
        raise ConfigError("J undefined: model is exactly identified")
    if fit.W_two is None:
        raise NumericalError("J unavailable: moment covariance is singular; collapse instruments")
    d = fit.data
    u2 = d.y - d.X @ fit.params_two
    g = np.einsum("irl,ir->l", d.Z, u2)
    J = float(g @ fit.W_two @ g)
    return HansenResult(J, df, float(stats.chi2.sf(J, df)))


class ARTestResult(NamedTuple):
    order: int
    z: float
    pvalue: float


def ar_test(fit: GMMFit, order: int) -> ARTestResult:
    """Arellano-Bond test for serial correlation of order ``order`` in the
    first-differenced residuals, with the estimation-effect correction."""
    d = fit.data
    R = d.n_diff
    if order < 1:
        raise ConfigError("order must be positive")
    if order >= R:
        raise ConfigError(f"AR({order}) needs more than {order + 3} periods")
    v = fit.resid[:, :R]
    w = np.zeros_like(v)
    w[:, order:] = v[:, :-order]
    Xd = d.X[:, :R, :]
    prod = np.einsum("ir,ir->i", w, v)
    num = prod.sum()
    XZ = np.einsum("irk,irl->kl", d.X, d.Z)
    A = XZ @ fit.W @ XZ.T
    M = linalg.solve(0.5 * (A + A.T), XZ @ fit.W, assume_a="pos")
    a = np.einsum("ir,irk->k", w, Xd)
    b = np.einsum("irl,ir,i->l", d.Z, fit.resid, prod)
    var = prod @ prod - 2.0 * a @ M @ b + a @ fit.cov @ a
    if not var > 0:
        raise NumericalError(f"AR({order}) variance is not positive")
    z = float(num / np.sqrt(var))
    return ARTestResult(order, z, float(2 * stats.norm.sf(abs(z))))

"""Synthetic panels with known parameters, and a Monte Carlo harness.

The count model is ``N_it ~ Poisson(c_i exp(b1 M_it + b2 x_it + zeta_t + kappa_it))``
with reduced form ``M_it = pi m_it + pi_lag m_i,t-1 + g x_it + c2_i + eta_t + u_it``,
where ``m`` are recalls per 100 products and ``(kappa, u)`` are jointly drawn
through a Gaussian copula with correlation ``corr``.

Seeds
-----
A single master seed feeds ``numpy.random.SeedSequence``.  Replication ``r``
of :func:`monte_carlo` uses ``SeedSequence(seed).spawn(reps)[r]``, so every
replication owns an independent stream and results are independent of
execution order.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import stats

from .errors import ConfigError, NumericalError, PanelDataError
from .panel import FeatureSpec, Panel, normalize_recalls

MAX_RATE = 1e9

CF_SPEC = FeatureSpec(
    outcome="trials",
    endogenous="log_sales",
    instruments=["recalls_norm", "L1.recalls_norm"],
    controls=["x1"],
    year_dummies=True,
)


@dataclass(frozen=True)
class DGPParams:
    """Parameters of the structural simulation (defaults give a moderate design)."""

    n_entities: int = 200
    n_periods: int = 8
    first_year: int = 2004
    beta1: float = 0.6
    beta2: float = 0.2
    pi: float = -0.03
    pi_lag: float = -0.03
    gamma: float = 0.3
    corr: float = 0.0
    sd_kappa: float = 0.5
    sd_u: float = 0.3
    marginal: str = "normal"
    sd_c: float = 0.5
    sd_c2: float = 1.0
    het_corr: float = 0.5
    log_base_rate: float = 1.5
    mean_log_sales: float = 10.0
    year_sd: float = 0.1
    intensity: float = 2.0
    products_mean: float = 50.0
    exit_rate: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.n_entities < 2 or self.n_periods < 3:
            raise ConfigError("need at least 2 entities and 3 periods")
        if not -1.0 <= self.corr <= 1.0:
            raise ConfigError("corr must lie in [-1, 1]")
        if self.intensity < 0:
            raise ConfigError("recall intensity must be nonnegative")
        if self.marginal not in _MARGINALS:
            raise ConfigError(f"marginal must be one of {sorted(_MARGINALS)}")
        if min(self.sd_kappa, self.sd_u, self.sd_c, self.sd_c2) < 0 or not 0 <= self.exit_rate < 1:
            raise ConfigError("scales must be nonnegative and exit_rate in [0, 1)")

    @classmethod
    def from_dict(cls, d) -> "DGPParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown DGP parameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


_MARGINALS = {
    "normal": lambda g: g,
    # unit-variance Laplace through the copula
    "laplace": lambda g: stats.laplace.ppf(stats.norm.cdf(g)) / np.sqrt(2.0),
}


def _joint_shocks(rng, shape, corr, marginal):
    z1 = rng.standard_normal(shape)
    z2 = corr * z1 + np.sqrt(1.0 - corr**2) * rng.standard_normal(shape)
    f = _MARGINALS[marginal]
    return f(z1), f(z2)


def simulate_rosters(params: DGPParams, rng: np.random.Generator):
    """Product rosters per entity for the burn-in period and ``n_periods`` periods.

    Returns a list (per entity) of lists of ``frozenset`` product ids, length
    ``n_periods + 1`` (index 0 is the pre-sample period).
    """
    rosters = []
    sizes = params.products_mean * np.exp(0.3 * rng.standard_normal(params.n_entities))
    next_id = 0
    for i in range(params.n_entities):
        n0 = max(1, int(rng.poisson(sizes[i])))
        cur = set(range(next_id, next_id + n0))
        next_id += n0
        hist = [frozenset(cur)]
        for _ in range(params.n_periods):
            survive = rng.random(len(cur)) >= params.exit_rate
            cur = {p for p, s in zip(sorted(cur), survive) if s}
            n_new = int(rng.poisson(sizes[i] * params.exit_rate))
            if not cur and n_new == 0:
                n_new = 1
            cur |= set(range(next_id, next_id + n_new))
            next_id += n_new
            hist.append(frozenset(cur))
        rosters.append(hist)
    return rosters


def simulate_panel(params: DGPParams, rng: np.random.Generator | None = None, latent: bool = False,
                   return_rosters: bool = False):
    """Draw one panel from the structural model.

    Columns: ``trials`` (counts), ``log_sales`` (endogenous), ``recalls``,
    ``n_products``, ``lost_products`` (products present at ``t-1`` and gone at
    ``t``), ``recalls_norm`` (per 100 products) and ``x1`` (exogenous
    control).  With ``latent`` the shocks ``kappa`` and ``u`` are included.
    """
    rng = np.random.default_rng(params.seed) if rng is None else rng
    N, T = params.n_entities, params.n_periods
    rosters = simulate_rosters(params, rng)
    prods = np.array([[len(r) for r in hist] for hist in rosters], dtype=float)  # (N, T+1)
    lost = np.array([[len(a - b) for a, b in zip(hist, hist[1:])] for hist in rosters], dtype=float)
    recalls = rng.poisson(params.intensity / 100.0 * prods).astype(float)
    m = normalize_recalls(recalls, prods)

    eta_i = rng.standard_normal(N)
    mbar = m.mean(axis=1)
    mstd = (mbar - mbar.mean()) / (mbar.std() + 1e-12)
    h = params.het_corr
    c2 = params.mean_log_sales + params.sd_c2 * (h * mstd + np.sqrt(1 - h**2) * eta_i)
    log_c = params.log_base_rate - params.beta1 * c2 + params.sd_c * (
        h * mstd + np.sqrt(1 - h**2) * rng.standard_normal(N)
    )
    x1 = 0.5 * rng.standard_normal((N, 1)) + rng.standard_normal((N, T))
    yr_m = params.year_sd * rng.standard_normal(T)
    yr_n = params.year_sd * rng.standard_normal(T)
    kappa, u = _joint_shocks(rng, (N, T), params.corr, params.marginal)
    kappa *= params.sd_kappa
    u *= params.sd_u

    cur, lag = m[:, 1:], m[:, :-1]
    M = params.pi * cur + params.pi_lag * lag + params.gamma * x1 + c2[:, None] + yr_m + u
    log_rate = log_c[:, None] + params.beta1 * M + params.beta2 * x1 + yr_n + kappa
    if not np.all(log_rate < np.log(MAX_RATE)):
        raise NumericalError("explosive parameters: Poisson mean exceeds 1e9")
    counts = rng.poisson(np.exp(log_rate)).astype(float)

    cols = {
        "trials": counts,
        "log_sales": M,
        "recalls": recalls[:, 1:],
        "n_products": prods[:, 1:],
        "lost_products": lost,
        "recalls_norm": cur,
        "x1": x1,
    }
    if latent:
        cols["kappa"] = kappa
        cols["u"] = u
    width = len(str(N - 1))
    panel = Panel(
        [f"E{i:0{width}d}" for i in range(N)],
        range(params.first_year, params.first_year + T),
        cols,
    )
    if return_rosters:
        return panel, [hist[1:] for hist in rosters]
    return panel


def population_first_stage_f(params: DGPParams) -> float:
    """Approximate expected first-stage F for the two recall instruments.

    Uses the noncentrality ``n * pi' S pi / sd_u^2`` with ``S`` the within
    covariance of (current, lagged) normalized recalls, so ``E[F] ~ 1 + lambda/q``.
    """
    var_m = 100.0 * params.intensity / params.products_mean
    T_eff = params.n_periods - 1
    within = var_m * (1 - 1 / T_eff)
    lam = params.n_entities * T_eff * within * (params.pi**2 + params.pi_lag**2) / params.sd_u**2
    return 1.0 + lam / 2.0


@dataclass(frozen=True)
class AR1Params:
    """Dynamic panel ``y_it = a y_i,t-1 + b x_it + c_i + e_it`` with stationary start."""

    n_entities: int = 200
    n_periods: int = 6
    first_year: int = 2004
    rho: float = 0.5
    beta: float = 0.0
    sd_c: float = 0.5
    sd_e: float = 1.0
    ma: float = 0.0
    invalid_loading: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_entities < 2 or self.n_periods < 3:
            raise ConfigError("need at least 2 entities and 3 periods")
        if not -1 < self.rho < 1:
            raise ConfigError("autoregressive coefficient must be inside (-1, 1)")

    @classmethod
    def from_dict(cls, d) -> "AR1Params":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown AR(1) parameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def simulate_ar1_panel(params: AR1Params, rng: np.random.Generator | None = None) -> Panel:
    """Draw a dynamic panel with mean-stationary initial conditions.

    ``ma`` adds an MA(1) component to the level errors.  A nonzero
    ``invalid_loading`` emits column ``z_bad = e_it + noise`` correlated
    with the error; ``z_ok`` is a valid exogenous instrument.
    """
    rng = np.random.default_rng(params.seed) if rng is None else rng
    N, T, a = params.n_entities, params.n_periods, params.rho
    burn = 50
    c = params.sd_c * rng.standard_normal(N)
    x = rng.standard_normal((N, T + burn))
    w = params.sd_e * rng.standard_normal((N, T + burn + 1))
    e = w[:, 1:] + params.ma * w[:, :-1]
    y = np.empty((N, T + burn))
    # stationary start: mean c/(1-a); burn-in absorbs the rest
    y_prev = c / (1 - a) + params.sd_e / np.sqrt(1 - a**2) * rng.standard_normal(N)
    for t in range(T + burn):
        y[:, t] = a * y_prev + params.beta * x[:, t] + c + e[:, t]
        y_prev = y[:, t]
    sl = slice(burn, burn + T)
    cols = {"y": y[:, sl], "x": x[:, sl], "z_ok": rng.standard_normal((N, T))}
    if params.invalid_loading:
        cols["z_bad"] = params.invalid_loading * e[:, sl] + rng.standard_normal((N, T))
    width = len(str(N - 1))
    return Panel([f"E{i:0{width}d}" for i in range(N)], range(params.first_year, params.first_year + T), cols)


@dataclass
class MCReport:
    """Per-replication estimates and their summaries."""

    pipeline: str
    reps: int
    seed: int
    truth: dict
    estimates: dict
    failures: int
    elapsed: float = field(default=0.0, compare=False)

    def rate(self, key: str, alpha: float = 0.05) -> float:
        """Share of replications with p-value column ``key`` below ``alpha``."""
        return float(np.mean(np.asarray(self.estimates[key]) < alpha))

    def coverage(self, est: str, se: str, truth: float, level: float = 0.95) -> float:
        zc = stats.norm.ppf(0.5 + level / 2)
        b, s = np.asarray(self.estimates[est]), np.asarray(self.estimates[se])
        return float(np.mean(np.abs(b - truth) <= zc * s))

    def summary(self) -> dict:
        out = {}
        for key, vals in self.estimates.items():
            v = np.asarray(vals, dtype=float)
            row = {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0}
            if key in self.truth:
                row["bias"] = float(v.mean() - self.truth[key])
                row["rmse"] = float(np.sqrt(np.mean((v - self.truth[key]) ** 2)))
                se_key = key.replace("beta", "se", 1) if key.startswith("beta") else f"se_{key}"
                if se_key in self.estimates:
                    row["coverage95"] = self.coverage(key, se_key, self.truth[key])
            if key.startswith("p_"):
                row["rejection05"] = self.rate(key)
            out[key] = row
        return out

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline,
            "reps": self.reps,
            "seed": self.seed,
            "failures": self.failures,
            "truth": dict(self.truth),
            "summary": self.summary(),
        }

    def to_csv(self) -> str:
        keys = list(self.estimates)
        lines = [",".join(["rep", *keys])]
        for r in range(len(self.estimates[keys[0]]) if keys else 0):
            lines.append(",".join([str(r)] + [repr(float(self.estimates[k][r])) for k in keys]))
        return "\n".join(lines) + "\n"


def _cf_pipeline(params, rng):
    from .cfiv import fit_naive, run_cf_iv

    panel = simulate_panel(params, rng)
    res = run_cf_iv(panel, CF_SPEC)
    naive, ncov = fit_naive(panel, CF_SPEC)
    jn = naive.index("log_sales")
    return {
        "beta_cf": res.beta,
        "se_cf": res.se("log_sales"),
        "rho": res.rho,
        "se_rho": res.se("cf_resid"),
        "p_wald": res.wald.pvalue,
        "f_stat": res.f_test.statistic,
        "p_f": res.f_test.pvalue,
        "beta_naive": float(naive.params[jn]),
        "se_naive": float(np.sqrt(ncov[jn, jn])),
    }


def _first_stage_pipeline(params, rng):
    from .linfe import cluster_robust_cov, fit_within_ols, instrument_f_stat

    panel = simulate_panel(params, rng)
    fit = fit_within_ols(panel, "log_sales", [*CF_SPEC.instruments, "x1"], year_dummies=True)
    cov = cluster_robust_cov(fit)
    f = instrument_f_stat(fit, cov, CF_SPEC.instruments)
    j = fit.index("recalls_norm")
    return {
        "f_stat": f.statistic,
        "p_f": f.pvalue,
        "pi": float(fit.params[j]),
        "se_pi": float(np.sqrt(cov[j, j])),
    }


def _gmm_pipeline(params, rng):
    from .dyngmm import GMMSpec, ar_test, fit_system_gmm, hansen_j

    panel = simulate_ar1_panel(params, rng)
    fit = fit_system_gmm(panel, GMMSpec(dep="y", exog=["x"], collapse=True), step="one")
    j = fit.index("L1.y")
    hj = hansen_j(fit)
    return {
        "rho": float(fit.params[j]),
        "se_rho": float(fit.std_errors[j]),
        "p_hansen": hj.pvalue,
        "p_ar1": ar_test(fit, 1).pvalue,
        "p_ar2": ar_test(fit, 2).pvalue,
    }


PIPELINES = {
    "cf": (_cf_pipeline, DGPParams),
    "first-stage": (_first_stage_pipeline, DGPParams),
    "gmm": (_gmm_pipeline, AR1Params),
}


def _truth(pipeline, params):
    if pipeline == "cf":
        return {"beta_cf": params.beta1, "beta_naive": params.beta1}
    if pipeline == "first-stage":
        return {"pi": params.pi}
    return {"rho": params.rho}


def _run_one(args):
    pipeline, params, child = args
    fn = PIPELINES[pipeline][0]
    try:
        return fn(params, np.random.default_rng(child))
    except (NumericalError, PanelDataError):
        return None


def monte_carlo(params, pipeline: str = "cf", reps: int = 500, seed: int | None = None,
                n_jobs: int = 1, max_failure_rate: float = 0.05) -> MCReport:
    """Repeat simulate-then-estimate ``reps`` times.

    Parameters
    ----------
    params : DGPParams or AR1Params
        Must match the pipeline (``"gmm"`` uses :class:`AR1Params`).
    pipeline : {"cf", "first-stage", "gmm"}
    reps : int
        At least 50.
    seed : int, optional
        Master seed, defaults to ``params.seed``.
    n_jobs : int
        Worker processes; results are identical for any value.
    """
    if pipeline not in PIPELINES:
        raise ConfigError(f"unknown pipeline {pipeline!r}; choose from {sorted(PIPELINES)}")
    if not isinstance(params, PIPELINES[pipeline][1]):
        raise ConfigError(f"pipeline {pipeline!r} needs {PIPELINES[pipeline][1].__name__}")
    if reps < 50:
        raise ConfigError("monte_carlo needs reps >= 50")
    seed = params.seed if seed is None else int(seed)
    children = np.random.SeedSequence(seed).spawn(reps)
    tasks = [(pipeline, params, c) for c in children]
    t0 = time.perf_counter()
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_run_one, tasks, chunksize=max(1, reps // (4 * n_jobs))))
    else:
        results = [_run_one(t) for t in tasks]
    failures = sum(r is None for r in results)
    if failures > max_failure_rate * reps:
        raise NumericalError(f"{failures} of {reps} Monte Carlo replications failed")
    ok = [r for r in results if r is not None]
    estimates = {k: np.array([r[k] for r in ok]) for k in ok[0]}
    return MCReport(pipeline, reps, seed, _truth(pipeline, params), estimates, failures,
                    time.perf_counter() - t0)


def with_overrides(params, **kw):
    """Copy of a frozen parameter set with some fields replaced."""
    return replace(params, **kw)


@dataclass(frozen=True)
class EventParams:
    """Growth-rate panel with a one-period shock in each treated unit's event year."""

    n_treated: int = 50
    n_control: int = 100
    n_sectors: int = 10
    n_periods: int = 12
    first_year: int = 2004
    shock: float = -0.20
    beta: float = 0.8
    sd_u: float = 0.2
    sd_entity: float = 0.05
    sd_sector: float = 0.1
    seed: int = 0

    @classmethod
    def from_dict(cls, d) -> "EventParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown event-study parameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def simulate_event_panel(params: EventParams, rng: np.random.Generator | None = None) -> Panel:
    """Columns ``growth``, ``sector_growth`` and ``recall`` (1 in the event year)."""
    rng = np.random.default_rng(params.seed) if rng is None else rng
    N = params.n_treated + params.n_control
    T = params.n_periods
    sector = rng.integers(0, params.n_sectors, N)
    g_sector = params.sd_sector * rng.standard_normal((params.n_sectors, T))
    agg = g_sector[sector]
    mu = params.sd_entity * rng.standard_normal(N)
    lam = 0.02 * rng.standard_normal(T)
    y = params.beta * agg + mu[:, None] + lam + params.sd_u * rng.standard_normal((N, T))
    recall = np.zeros((N, T))
    ev = rng.integers(0, T, params.n_treated)
    recall[np.arange(params.n_treated), ev] = 1.0
    y[np.arange(params.n_treated), ev] += params.shock
    width = len(str(N - 1))
    return Panel(
        [f"E{i:0{width}d}" for i in range(N)],
        range(params.first_year, params.first_year + T),
        {"growth": y, "sector_growth": agg, "recall": recall},
        [f"S{s}" for s in sector],
    )


@dataclass(frozen=True)
class LifetimeParams:
    """Exponential product lifetimes for two groups with administrative censoring."""

    n_per_group: int = 500
    hazard_a: float = 0.25
    hazard_b: float = 0.10
    horizon: float = 20.0
    labels: tuple = ("recalled", "other")
    seed: int = 0

    @classmethod
    def from_dict(cls, d) -> "LifetimeParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown lifetime parameters: {sorted(unknown)}")
        d = dict(d)
        if "labels" in d:
            d["labels"] = tuple(d["labels"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d


def simulate_lifetimes(params: LifetimeParams, rng: np.random.Generator | None = None) -> dict:
    """``{label: (durations, events)}``; lifetimes beyond ``horizon`` are censored there."""
    if params.hazard_a <= 0 or params.hazard_b <= 0 or params.horizon <= 0:
        raise ConfigError("hazards and horizon must be positive")
    rng = np.random.default_rng(params.seed) if rng is None else rng
    out = {}
    for label, lam in zip(params.labels, (params.hazard_a, params.hazard_b)):
        t = rng.exponential(1.0 / lam, params.n_per_group)
        out[label] = (np.minimum(t, params.horizon), t <= params.horizon)
    return out

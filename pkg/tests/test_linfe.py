import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings, strategies as st
from scipy import stats

from cfpanel.errors import CollinearityError
from cfpanel.linfe import cluster_robust_cov, fit_within_ols, instrument_f_stat
from cfpanel.panel import Panel
from conftest import random_panel


def lsdv(panel, dep, names, year_dummies=False):
    """Coefficients from OLS on entity dummies (the brute-force oracle)."""
    N, T = panel.n_entities, panel.n_times
    X = panel.stack(names)
    if year_dummies:
        X = np.column_stack([X, np.kron(np.ones((N, 1)), np.eye(T)[:, 1:])])
    D = np.kron(np.eye(N), np.ones((T, 1)))
    b, *_ = np.linalg.lstsq(np.column_stack([X, D]), panel[dep].reshape(-1), rcond=None)
    return b[: X.shape[1]]


def test_matches_lsdv(rng):
    p = random_panel(rng, 7, 5, 3)
    fit = fit_within_ols(p, "y", ["x0", "x1", "x2"], year_dummies=True)
    np.testing.assert_allclose(fit.params, lsdv(p, "y", ["x0", "x1", "x2"], True), atol=1e-10)
    assert fit.df_resid == 35 - 7 - 7
    assert fit.names[-1] == "year_2004"


def test_residuals_sum_to_zero_within_entities(rng):
    p = random_panel(rng, 6, 4, 2)
    fit = fit_within_ols(p, "y", ["x0", "x1"])
    np.testing.assert_allclose(fit.resid_panel().sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(fit.X.T @ fit.resid, 0.0, atol=1e-10)


def test_cluster_covariance_matches_statsmodels(rng):
    clusters = [f"g{i % 5}" for i in range(15)]
    p = random_panel(rng, 15, 6, 2, clusters=clusters)
    fit = fit_within_ols(p, "y", ["x0", "x1"])
    V = cluster_robust_cov(fit)
    groups = np.repeat([int(c[1:]) for c in clusters], 6)
    ref = sm.OLS(fit.y - fit.y.reshape(15, 6).mean(1).repeat(6), fit.X).fit(
        cov_type="cluster", cov_kwds={"groups": groups}
    )
    np.testing.assert_allclose(ref.params, fit.params, atol=1e-10)
    np.testing.assert_allclose(V, ref.cov_params(), rtol=1e-10)


def test_cluster_covariance_without_small_sample_factor(rng):
    p = random_panel(rng, 10, 4, 1)
    fit = fit_within_ols(p, "y", ["x0"])
    n, k, G = 40, 1, 10
    ratio = cluster_robust_cov(fit)[0, 0] / cluster_robust_cov(fit, small_sample=False)[0, 0]
    assert ratio == pytest.approx(G / (G - 1) * (n - 1) / (n - k))


def test_f_stat_single_restriction_is_squared_t(rng):
    p = random_panel(rng, 20, 5, 2)
    fit = fit_within_ols(p, "y", ["x0", "x1"])
    V = cluster_robust_cov(fit)
    f = instrument_f_stat(fit, V, ["x1"])
    assert f.statistic == pytest.approx(fit.params[1] ** 2 / V[1, 1])
    assert (f.df_num, f.df_denom) == (1, 19)
    assert f.pvalue == pytest.approx(stats.f.sf(f.statistic, 1, 19))


def test_f_stat_joint(rng):
    p = random_panel(rng, 20, 5, 3)
    fit = fit_within_ols(p, "y", ["x0", "x1", "x2"])
    V = cluster_robust_cov(fit)
    f = instrument_f_stat(fit, V, ["x0", "x2"])
    b = fit.params[[0, 2]]
    W = b @ np.linalg.solve(V[np.ix_([0, 2], [0, 2])], b)
    assert f.statistic == pytest.approx(W / 2)


def test_absorbed_regressor_dropped_or_raised(rng):
    p = random_panel(rng, 5, 4, 1)
    p = p.with_columns(const_i=np.repeat(rng.normal(size=(5, 1)), 4, axis=1))
    fit = fit_within_ols(p, "y", ["x0", "const_i"])
    assert fit.dropped == ["const_i"] and fit.names == ["x0"]
    with pytest.raises(CollinearityError, match="const_i"):
        fit_within_ols(p, "y", ["x0", "const_i"], drop_absorbed=False)


def test_collinear_regressors_named(rng):
    p = random_panel(rng, 6, 4, 2)
    p = p.with_columns(x2=2 * p["x0"] - p["x1"])
    with pytest.raises(CollinearityError) as err:
        fit_within_ols(p, "y", ["x0", "x1", "x2"])
    assert set(err.value.columns) == {"x0", "x1", "x2"}


def test_lagged_regressor_trims_first_period(rng):
    p = random_panel(rng, 6, 5, 1)
    fit = fit_within_ols(p, "y", ["x0", "L1.x0"])
    assert fit.times == (2001, 2002, 2003, 2004)
    w = p.window(2001, 2004).with_columns(lag=p["L1.x0"][:, 1:])
    np.testing.assert_allclose(fit.params, lsdv(w, "y", ["x0", "lag"]), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0), st.floats(-50, 50))
def test_scaling_and_entity_shift_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    p = random_panel(rng, 5, 4, 2)
    base = fit_within_ols(p, "y", ["x0", "x1"])
    q = p.with_columns(x0=p["x0"] * scale, y=p["y"] + shift * rng.normal(size=(5, 1)))
    fit = fit_within_ols(q, "y", ["x0", "x1"])
    np.testing.assert_allclose(fit.params[0] * scale, base.params[0], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(fit.params[1], base.params[1], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(fit.resid, base.resid, atol=1e-8 * (1 + abs(shift)))

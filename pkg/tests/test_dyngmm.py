import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg, stats

from cfpanel.dgp import AR1Params, simulate_ar1_panel
from cfpanel.dyngmm import (
    GMMSpec,
    ar_test,
    build_gmm_instruments,
    build_system,
    estimate_gmm,
    fit_system_gmm,
    hansen_j,
)
from cfpanel.errors import ConfigError, NumericalError
from cfpanel.panel import Panel


def ar1(seed, **kw):
    return simulate_ar1_panel(AR1Params(seed=seed, **kw))


def oracle_ab(y, system):
    """Arellano-Bond / Blundell-Bond for y_t = a y_{t-1} (+ const) built entity by entity.

    Equations for periods t = 2..T-1; uncollapsed instruments y_0..y_{t-2}
    for the differenced equation, dy_{t-1} per period plus a constant for the
    level equation.
    """
    N, T = y.shape
    R = T - 2
    nd = sum(t - 1 for t in range(2, T))
    L = nd + (R + 1 if system else 0)
    Hd = 2 * np.eye(R) - np.eye(R, k=1) - np.eye(R, k=-1)
    H = linalg.block_diag(Hd, np.eye(R)) if system else Hd
    Zs, Xs, Ys = [], [], []
    for i in range(N):
        rows = 2 * R if system else R
        Z = np.zeros((rows, L))
        k = 0
        for r, t in enumerate(range(2, T)):
            for s in range(0, t - 1):
                Z[r, k] = y[i, s]
                k += 1
        X = [[y[i, t - 1] - y[i, t - 2]] + ([0.0] if system else []) for t in range(2, T)]
        Y = [y[i, t] - y[i, t - 1] for t in range(2, T)]
        if system:
            for r, t in enumerate(range(2, T)):
                Z[R + r, nd + r] = y[i, t - 1] - y[i, t - 2]
                Z[R + r, L - 1] = 1.0
                X.append([y[i, t - 1], 1.0])
                Y.append(y[i, t])
        Zs.append(Z)
        Xs.append(np.array(X))
        Ys.append(np.array(Y))
    ZX = sum(Z.T @ X for Z, X in zip(Zs, Xs))
    ZY = sum(Z.T @ Y for Z, Y in zip(Zs, Ys))
    W1 = np.linalg.inv(sum(Z.T @ H @ Z for Z in Zs))
    b1 = np.linalg.solve(ZX.T @ W1 @ ZX, ZX.T @ W1 @ ZY)
    g = [Z.T @ (Y - X @ b1) for Z, X, Y in zip(Zs, Xs, Ys)]
    S = sum(np.outer(v, v) for v in g)
    A1 = np.linalg.inv(ZX.T @ W1 @ ZX)
    V1 = A1 @ ZX.T @ W1 @ S @ W1 @ ZX @ A1
    W2 = np.linalg.inv(S)
    b2 = np.linalg.solve(ZX.T @ W2 @ ZX, ZX.T @ W2 @ ZY)
    gbar = sum(Z.T @ (Y - X @ b2) for Z, X, Y in zip(Zs, Xs, Ys))
    J = gbar @ W2 @ gbar
    return b1, V1, b2, np.linalg.inv(ZX.T @ W2 @ ZX), J, L


@pytest.mark.parametrize("system", [False, True])
def test_matches_loop_oracle(system):
    p = ar1(3, n_entities=60, n_periods=6)
    spec = GMMSpec("y", year_dummies=False, constant=True, system=system, collapse=False)
    one = fit_system_gmm(p, spec, "one")
    two = fit_system_gmm(p, spec, "two")
    b1, V1, b2, V2, J, L = oracle_ab(np.array(p["y"]), system)
    assert one.n_instruments == L
    np.testing.assert_allclose(one.params, b1, rtol=1e-9)
    np.testing.assert_allclose(one.cov, V1, rtol=1e-8)
    np.testing.assert_allclose(two.params, b2, rtol=1e-9)
    np.testing.assert_allclose(two.cov, V2, rtol=1e-8)
    h = hansen_j(two)
    assert h.statistic == pytest.approx(J, rel=1e-8)
    assert h.df == L - len(b1)
    assert hansen_j(one).statistic == pytest.approx(h.statistic)


def test_instrument_counts_by_enumeration():
    p4 = ar1(0, n_periods=4, n_entities=10)
    b = build_gmm_instruments(p4, "y", 2, 2, collapse=True)
    assert (b.diff.shape[2], b.level.shape[2]) == (1, 1)
    p5 = ar1(0, n_periods=5, n_entities=10)
    b = build_gmm_instruments(p5, "y", 2, 4, collapse=False)
    # (t, lag) pairs with t = 2, 3, 4 and 2 <= lag <= t: 1 + 2 + 3
    assert b.diff.shape[2] == 6
    assert b.level.shape[2] == 3
    b = build_gmm_instruments(p5, "y", 2, 4, collapse=True)
    assert b.count == 3 + 1


def test_lag_window_errors():
    p = ar1(0, n_periods=4, n_entities=10)
    with pytest.raises(ConfigError, match="empty"):
        build_gmm_instruments(p, "y", lag_min=4)
    with pytest.raises(ConfigError):
        build_gmm_instruments(p, "y", lag_min=1)
    with pytest.raises(ConfigError):
        build_gmm_instruments(p, "y", lag_min=2, lag_max=4)


def test_exactly_identified_one_step_equals_two_step():
    p = ar1(5)
    spec = GMMSpec("y", system=False, collapse=True, lag_min=2, lag_max=2, year_dummies=False)
    one = fit_system_gmm(p, spec, "one")
    two = fit_system_gmm(p, spec, "two")
    assert one.n_instruments == one.n_params == 1
    np.testing.assert_allclose(two.params, one.params, atol=1e-8)
    with pytest.raises(ConfigError, match="J undefined"):
        hansen_j(one)


def test_difference_residuals_are_differenced_level_residuals():
    fit = fit_system_gmm(ar1(2), GMMSpec("y", ["x"], collapse=True), "two")
    np.testing.assert_allclose(fit.diff_resid, np.diff(fit.level_resid(), axis=1), atol=1e-10)


def test_auto_collapse_and_warning():
    spec = GMMSpec("y", ["x"])
    assert fit_system_gmm(ar1(1, n_entities=20), spec).data.blocks.collapse is True
    assert fit_system_gmm(ar1(1, n_entities=200), spec).data.blocks.collapse is False
    with pytest.warns(UserWarning, match="instruments"):
        fit = fit_system_gmm(ar1(1, n_entities=12, n_periods=8), GMMSpec("y", collapse=False))
    with pytest.raises(NumericalError, match="J unavailable"):
        hansen_j(fit)


def test_ar_order_needs_periods():
    fit = fit_system_gmm(ar1(1, n_periods=4), GMMSpec("y", collapse=True))
    ar_test(fit, 1)
    with pytest.raises(ConfigError, match="AR\\(2\\)"):
        ar_test(fit, 2)


def test_report_flags_uncorrected_two_step():
    d = fit_system_gmm(ar1(1), GMMSpec("y", ["x"], collapse=True), "two").to_dict()
    assert d["se_type"] == "two-step, uncorrected"
    assert d["instruments"]["collapse"] is True


def test_unknown_column():
    with pytest.raises(ConfigError, match="'w'"):
        fit_system_gmm(ar1(1), GMMSpec("y", ["w"]))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_instrument_scaling_invariance(seed):
    rng = np.random.default_rng(seed)
    data = build_system(ar1(seed % 1000, n_entities=80), GMMSpec("y", ["x"], collapse=True))
    scale = np.exp(rng.uniform(-3, 3, size=data.Z.shape[2]))
    scaled = dataclasses.replace(data, Z=data.Z * scale)
    for step in ("one", "two"):
        a, b = estimate_gmm(data, step), estimate_gmm(scaled, step)
        np.testing.assert_allclose(b.params, a.params, rtol=1e-7, atol=1e-9)
    assert hansen_j(estimate_gmm(scaled, "two")).statistic == pytest.approx(
        hansen_j(estimate_gmm(data, "two")).statistic, rel=1e-6
    )


def _mc(params, spec, step, reps, fn):
    out = []
    for child in np.random.SeedSequence(params.seed).spawn(reps):
        fit = fit_system_gmm(simulate_ar1_panel(params, np.random.default_rng(child)), spec, step)
        out.append(fn(fit))
    return np.array(out)


def test_hansen_detects_invalid_instrument():
    spec = GMMSpec("y", ["x"], extra_instruments=["z_bad"], collapse=True)
    p = _mc(AR1Params(invalid_loading=0.5, seed=21), spec, "two", 100, lambda f: hansen_j(f).pvalue)
    assert np.mean(p < 0.05) >= 0.8


def test_ar2_detects_ma_errors():
    spec = GMMSpec("y", ["x"], collapse=True)
    p = _mc(AR1Params(ma=0.5, seed=22), spec, "one", 100, lambda f: ar_test(f, 2).pvalue)
    assert np.mean(p < 0.05) >= 0.6


def test_zero_autoregression_coverage():
    spec = GMMSpec("y", ["x"], collapse=True)

    def covers(f):
        j = f.index("L1.y")
        return abs(f.params[j]) <= stats.norm.ppf(0.975) * f.std_errors[j]

    assert _mc(AR1Params(rho=0.0, seed=23), spec, "one", 200, covers).mean() >= 0.9

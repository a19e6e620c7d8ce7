import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfpanel.errors import ConfigError, PanelDataError
from cfpanel.panel import (
    FeatureSpec,
    Panel,
    detrend_log_diff,
    filter_nonzero_outcome,
    hhi,
    load_panel,
    log_diff_column,
    normalize_recalls,
    outflow_rate,
    outflow_rate_column,
    parse_lagged_name,
    shift,
    within_demean,
)

CSV = """entity,year,cluster,y,x
a,2001,g1,1,0.5
a,2002,g1,2,1.5
a,2003,g1,0,2.5
b,2001,g2,3,-1
b,2002,g2,4,0
b,2003,g2,5,1
"""


def test_parse_lagged_name():
    assert parse_lagged_name("L2.x") == ("x", 2)
    assert parse_lagged_name("F1.recalls") == ("recalls", -1)
    assert parse_lagged_name("x") == ("x", 0)
    assert parse_lagged_name("L1.a.b") == ("a.b", 1)


def test_shift_fills_vacated_cells():
    v = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(shift(v, 1), [[np.nan, 0, 1], [np.nan, 3, 4]])
    np.testing.assert_array_equal(shift(v, -1), [[1, 2, np.nan], [4, 5, np.nan]])
    np.testing.assert_array_equal(shift(v, 0), v)


def test_load_panel_layout_and_clusters():
    p = load_panel(io.StringIO(CSV), cluster_column="cluster")
    assert p.entities == ("a", "b")
    assert p.times == (2001, 2002, 2003)
    assert p.clusters == ("g1", "g2")
    np.testing.assert_array_equal(p["y"], [[1, 2, 0], [3, 4, 5]])
    np.testing.assert_array_equal(p["L1.x"][:, 1:], [[0.5, 1.5], [-1, 0]])


def test_round_trip_csv():
    p = load_panel(io.StringIO(CSV), cluster_column="cluster")
    q = load_panel(io.StringIO(p.to_csv()), cluster_column="cluster")
    assert q.entities == p.entities and q.clusters == p.clusters
    for n in p.columns:
        np.testing.assert_array_equal(q[n], p[n])


@pytest.mark.parametrize(
    "text, message",
    [
        ("", "header row missing"),
        ("entity,y\na,1\n", "'year' missing"),
        (CSV.replace("a,2002,g1,2,1.5", "a,2002,g1,two,1.5"), "row 3, column 'y'"),
        (CSV.replace("a,2002,g1,2,1.5", "a,2002,g1,nan,1.5"), "row 3, column 'y'"),
        (CSV.replace("a,2002", "a,2001"), "duplicate (entity, year)"),
        (CSV.replace("b,2002,g2,4,0\n", ""), "missing (entity, year) = ('b', 2002)"),
        (CSV.replace("a,2003,g1", "a,2003,g2"), "several clusters"),
    ],
)
def test_load_panel_errors(text, message):
    with pytest.raises(PanelDataError, match=message.replace("(", r"\(").replace(")", r"\)")):
        load_panel(io.StringIO(text), cluster_column="cluster" if "cluster" in text else None)


def test_load_panel_missing_spec_column():
    spec = FeatureSpec("y", "x", ["z"])
    with pytest.raises(PanelDataError, match="'z'"):
        load_panel(io.StringIO(CSV), columns=[], spec=spec, cluster_column="cluster")


def test_panel_rejects_gaps_in_time():
    with pytest.raises(PanelDataError, match="consecutive"):
        Panel(["a"], [2000, 2002], {"y": [[1.0, 2.0]]})


def test_columns_are_read_only():
    p = Panel(["a"], [1, 2], {"y": [[1.0, 2.0]]})
    with pytest.raises(ValueError):
        p["y"][0, 0] = 5.0


def test_complete_window_trims_edges_and_flags_interior_gaps():
    p = Panel(["a", "b"], [1, 2, 3, 4], {"x": np.arange(8.0).reshape(2, 4)})
    w = p.complete_window(["x", "L1.x", "F1.x"])
    assert w.times == (2, 3)
    np.testing.assert_array_equal(w["L1.x"], [[0, 1], [4, 5]])
    np.testing.assert_array_equal(w["F1.x"], [[2, 3], [6, 7]])
    v = np.arange(8.0).reshape(2, 4)
    v[1, 2] = np.nan
    with pytest.raises(PanelDataError, match="entity 'b', year 3"):
        Panel(["a", "b"], [1, 2, 3, 4], {"x": v}).complete_window(["x"])


def test_year_dummies_base_is_first_period():
    p = Panel(["a", "b"], [5, 6, 7], {"x": np.zeros((2, 3))})
    d = p.year_dummies()
    assert list(d) == ["year_6", "year_7"]
    np.testing.assert_array_equal(d["year_6"], [[0, 1, 0], [0, 1, 0]])


def test_feature_spec_validation():
    p = load_panel(io.StringIO(CSV), cluster_column="cluster")
    FeatureSpec("y", "x", ["L1.x"]).validate(p)
    with pytest.raises(ConfigError, match="'nope'"):
        FeatureSpec("y", "x", ["nope"]).validate(p)
    with pytest.raises(ConfigError, match="at least one"):
        FeatureSpec("y", "x", []).validate()
    with pytest.raises(ConfigError, match="controls"):
        FeatureSpec("y", "x", ["z"], ["z"]).validate()
    with pytest.raises(ConfigError, match="unknown"):
        FeatureSpec.from_dict({"outcome": "y", "endogenous": "x", "bogus": 1})
    d = FeatureSpec("y", "x", ["z", "L1.z"], ["w"]).to_dict()
    assert FeatureSpec.from_dict(d).to_dict() == d


def test_filter_nonzero_outcome():
    p = Panel(["a", "b", "c"], [1, 2], {"y": [[0, 0], [1, 0], [0, 3]]})
    res = filter_nonzero_outcome(p, "y")
    assert res.panel.entities == ("b", "c")
    assert res.dropped == ("a",)
    assert res.dropped_fraction == pytest.approx(1 / 3)
    with pytest.raises(PanelDataError, match="no informative entities"):
        filter_nonzero_outcome(Panel(["a"], [1, 2], {"y": [[0, 0]]}), "y")
    with pytest.raises(PanelDataError, match="nonnegative integers"):
        filter_nonzero_outcome(Panel(["a"], [1, 2], {"y": [[0.5, 0]]}), "y")


def test_normalize_recalls():
    np.testing.assert_allclose(normalize_recalls([1, 0, 3], [50, 0, 200]), [2.0, 0.0, 1.5])
    with pytest.raises(PanelDataError):
        normalize_recalls([1], [0])


def test_hhi():
    assert hhi([1.0]) == 1.0
    assert hhi([0.25] * 4) == pytest.approx(0.25)
    assert hhi([0.5, 0.3, 0.2]) == pytest.approx(0.38)
    with pytest.raises(ValueError, match="sum"):
        hhi([0.5, 0.4])


def test_outflow_rate():
    assert outflow_rate(3, 60) == pytest.approx(0.05)
    with pytest.raises(PanelDataError, match="zero"):
        outflow_rate(1, 0)
    p = Panel(["a"], [1, 2, 3, 4], {"lost": [[0, 2, 4, 6]], "total": [[10, 20, 40, 80]]})
    r = outflow_rate_column(p, "lost", "total")
    np.testing.assert_allclose(r, [[np.nan, 4 / 10, 6 / 20, np.nan]])


def test_log_diff():
    np.testing.assert_allclose(detrend_log_diff([1.0, np.e, np.e**3]), [1.0, 2.0])
    with pytest.raises(ValueError):
        detrend_log_diff([1.0, 0.0])
    p = Panel(["a"], [1, 2, 3], {"s": [[1.0, 2.0, 4.0]]})
    np.testing.assert_allclose(log_diff_column(p, "s"), [[np.nan, np.log(2), np.log(2)]])


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(1, 6),
    st.integers(1, 3),
    st.integers(0, 2**32 - 1),
)
def test_within_demean_properties(N, T, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(N * T, k)) * rng.uniform(0.1, 1e3) + rng.normal(size=(N * T, k)) * 1e2
    g = np.repeat(np.arange(N), T)
    d = within_demean(x, g)
    for i in range(N):
        np.testing.assert_allclose(d[g == i].mean(axis=0), 0.0, atol=1e-10 * (1 + np.abs(x).max()))
    np.testing.assert_allclose(within_demean(d, g), d, atol=1e-10 * (1 + np.abs(x).max()))
    # adding entity constants leaves the result unchanged
    shifted = x + rng.normal(size=(N, 1))[g]
    np.testing.assert_allclose(within_demean(shifted, g), d, atol=1e-9 * (1 + np.abs(x).max()))

"""Kaplan-Meier product-limit estimates of product lifetimes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import PanelDataError


@dataclass
class SurvivalCurve:
    """Step function ``S(t)`` evaluated at the distinct event times.

    ``at_risk[i]`` counts units with duration ``>= times[i]``; ``censored[i]``
    counts censorings in ``[times[i], times[i+1])``, so that
    ``at_risk[i+1] = at_risk[i] - deaths[i] - censored[i]``.
    """

    times: np.ndarray
    at_risk: np.ndarray
    deaths: np.ndarray
    censored: np.ndarray
    survival: np.ndarray
    group: str = ""
    n: int = 0
    censored_before_first: int = 0

    def __call__(self, t) -> np.ndarray:
        """Evaluate the right-continuous step function at ``t``."""
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.times, t, side="right")
        s = np.concatenate([[1.0], self.survival])
        return s[k]

    def to_csv(self) -> str:
        lines = ["group,time,at_risk,deaths,censored,survival"]
        for row in zip(self.times, self.at_risk, self.deaths, self.censored, self.survival):
            t, n, d, c, s = row
            lines.append(f"{self.group},{_num(t)},{int(n)},{int(d)},{int(c)},{float(s)!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "n": self.n,
            "times": [float(t) for t in self.times],
            "survival": [float(s) for s in self.survival],
            "median": median_survival(self),
        }


def _num(x):
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def kaplan_meier(durations, events, group: str = "") -> SurvivalCurve:
    """Product-limit estimator.

    Parameters
    ----------
    durations : array_like
        Positive times to death or censoring.
    events : array_like of bool
        True for an observed death, False for a censored unit.
    group : str
        Label carried on the curve.

    Notes
    -----
    At a time with both deaths and censorings the deaths are counted first,
    i.e. units censored at ``t`` are still at risk at ``t``.
    """
    d = np.asarray(durations, dtype=float)
    e = np.asarray(events).astype(bool)
    if d.size == 0:
        raise PanelDataError("kaplan_meier needs at least one observation")
    if d.shape != e.shape:
        raise ValueError("durations and events must have the same length")
    if not np.all(d > 0):
        raise PanelDataError("durations must be strictly positive")
    times = np.unique(d[e])
    ds, dd, dc = np.sort(d), np.sort(d[e]), np.sort(d[~e])
    at_risk = d.size - np.searchsorted(ds, times, side="left")
    deaths = np.searchsorted(dd, times, side="right") - np.searchsorted(dd, times, side="left")
    nxt = np.append(times[1:], np.inf)
    cens = np.searchsorted(dc, nxt, side="left") - np.searchsorted(dc, times, side="left")
    surv = _product_limit(at_risk, deaths)
    before = int(((d < times[0]) & ~e).sum()) if times.size else int((~e).sum())
    return SurvivalCurve(times, at_risk, deaths, cens, surv, group, int(d.size), before)


def _product_limit(at_risk, deaths) -> np.ndarray:
    # exact rational product, rounded once per step (S = 1/3 is the float 1/3)
    s = Fraction(1)
    out = np.empty(len(at_risk))
    for i, (n, d) in enumerate(zip(at_risk, deaths)):
        s *= Fraction(int(n - d), int(n))
        out[i] = float(s)
    return out


def median_survival(curve: SurvivalCurve):
    """Smallest event time with ``S(t) <= 0.5``, or None if never reached."""
    hit = np.flatnonzero(curve.survival <= 0.5)
    return None if hit.size == 0 else float(curve.times[hit[0]])


def compare_groups(a: SurvivalCurve, b: SurvivalCurve) -> dict:
    """Median difference and the share of an integer-year grid where ``S_a < S_b``.

    The grid runs over integer years from the first event time of either
    curve to the last, dropping years in which both curves are already zero.
    Ties count one half.
    """
    if a.n == 0 or b.n == 0:
        raise PanelDataError("both curves must be nonempty")
    ma, mb = median_survival(a), median_survival(b)
    ends = [c.times for c in (a, b) if c.times.size]
    if ends:
        lo = int(np.floor(min(t[0] for t in ends)))
        hi = int(np.ceil(max(t[-1] for t in ends)))
        grid = np.arange(max(lo, 1), hi + 1, dtype=float)
        sa, sb = a(grid), b(grid)
        keep = (sa > 0) | (sb > 0)
        sa, sb = sa[keep], sb[keep]
    else:
        sa = sb = np.ones(1)
        grid = np.ones(1)
    if sa.size == 0:
        frac = 0.5
    else:
        frac = float(np.mean(np.where(sa < sb, 1.0, np.where(sa == sb, 0.5, 0.0))))
    return {
        "group_a": a.group,
        "group_b": b.group,
        "median_a": ma,
        "median_b": mb,
        "median_difference": None if ma is None or mb is None else ma - mb,
        "dominance_fraction": frac,
        "grid_points": int(sa.size),
    }


def read_survival_csv(source, duration="duration", event="event", group="group"):
    """Parse ``duration, event, group`` rows into per-group arrays."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, encoding="utf-8", newline="") as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    for col in (duration, event, group):
        if reader.fieldnames is None or col not in reader.fieldnames:
            raise PanelDataError(f"survival input missing column {col!r}")
    groups: dict[str, tuple[list, list]] = {}
    for rowno, row in enumerate(reader, start=2):
        try:
            d = float(row[duration])
            ev = int(float(row[event]))
        except (TypeError, ValueError):
            raise PanelDataError(f"row {rowno}: non-numeric duration/event") from None
        if ev not in (0, 1):
            raise PanelDataError(f"row {rowno}: event must be 0 or 1")
        ds, es = groups.setdefault(row[group], ([], []))
        ds.append(d)
        es.append(bool(ev))
    if not groups:
        raise PanelDataError("survival input has no rows")
    return {g: (np.array(ds), np.array(es)) for g, (ds, es) in sorted(groups.items())}

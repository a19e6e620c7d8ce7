"""Abnormal values around recall years.

The potential value of ``y_it`` is the in-sample fit of an entity
fixed-effects regression on an aggregate series, controls and year dummies.
Abnormal values (observed minus potential) are re-indexed on event time
``tau = year - event_year`` and averaged across the units with an event.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import PanelDataError
from .linfe import FEOLSFit, fit_within_ols
from .panel import Panel

CONVENTIONS = {
    "average": "sum of abnormal values divided by N_tau",
    "variance": "sum of forecast-error variances divided by N_tau^2",
    "forecast_variance": "sigma2_u + x'Var(b)x on demeaned regressors",
    "multiple_events": "first event year defines tau = 0",
}


@dataclass
class PotentialFit:
    fit: FEOLSFit
    potential: np.ndarray
    observed: np.ndarray
    forecast_var: np.ndarray
    parameter_uncertainty: bool = True

    @property
    def entities(self):
        return self.fit.entities

    @property
    def times(self):
        return self.fit.times


def fit_potential(
    panel: Panel,
    y: str,
    aggregate: str,
    controls: Sequence[str] = (),
    year_dummies: bool = True,
    parameter_uncertainty: bool = True,
) -> PotentialFit:
    """Fixed-effects fit of ``y`` on a contemporaneous aggregate, controls and year dummies.

    The aggregate must vary across entities within a year when year dummies
    are included (a market-wide series is absorbed by them).
    """
    fit = fit_within_ols(panel, y, [aggregate, *controls], year_dummies=year_dummies, drop_absorbed=False)
    N, T = fit.n_entities, len(fit.times)
    var = np.full(fit.nobs, fit.sigma2)
    if parameter_uncertainty:
        V = fit.classical_cov()
        var = var + np.einsum("nk,kl,nl->n", fit.X, V, fit.X)
    return PotentialFit(
        fit=fit,
        potential=fit.fitted.reshape(N, T),
        observed=fit.y.reshape(N, T),
        forecast_var=var.reshape(N, T),
        parameter_uncertainty=parameter_uncertainty,
    )


def abnormal_values(fit: PotentialFit) -> Panel:
    """Panel with ``av = observed - potential`` and its forecast variance ``av_var``."""
    return Panel(
        fit.entities,
        fit.times,
        {"av": fit.observed - fit.potential, "av_var": fit.forecast_var},
    )


def event_years_from(panel: Panel, column: str) -> tuple[dict, dict]:
    """First period with a positive value of ``column`` per entity.

    Returns ``(event_years, n_events)``; entities without events are omitted.
    """
    v = panel[column]
    years, counts = {}, {}
    for i, e in enumerate(panel.entities):
        hit = np.flatnonzero(np.nan_to_num(v[i]) > 0)
        if hit.size:
            years[e] = panel.times[hit[0]]
            counts[e] = int(hit.size)
    return years, counts


@dataclass
class EventPanel:
    """Abnormal values in event time, one record per kept cell."""

    entity: np.ndarray
    tau: np.ndarray
    av: np.ndarray
    var: np.ndarray
    event_years: dict
    multiple_events: int = 0

    def offset_counts(self) -> dict:
        taus, n = np.unique(self.tau, return_counts=True)
        return dict(zip(taus.tolist(), n.tolist()))


def recenter_event_time(
    av: Panel, event_years: Mapping[str, int | Sequence[int]]
) -> EventPanel:
    """Keep entities with an event and index their cells by ``year - event_year``.

    ``event_years`` maps entity to a year or a list of years; the earliest
    year is used and the number of entities with several events recorded.
    """
    known = set(av.entities)
    first = {}
    multi = 0
    for e, ys in event_years.items():
        ys = [ys] if np.ndim(ys) == 0 else list(ys)
        if not ys:
            continue
        multi += len(set(ys)) > 1
        first[str(e)] = int(min(ys))
    unknown = sorted(set(first) - known)
    if unknown:
        raise PanelDataError(f"event entities not in panel: {unknown}")
    outside = [f"{e}:{y}" for e, y in sorted(first.items()) if not av.times[0] <= y <= av.times[-1]]
    if outside:
        raise PanelDataError(f"event year outside panel window for: {', '.join(outside)}")
    if not first:
        raise PanelDataError("empty event sample: no entity has an event")
    times = np.asarray(av.times)
    ent, tau, vals, var = [], [], [], []
    for i, e in enumerate(av.entities):
        if e not in first:
            continue
        ent += [e] * len(times)
        tau.append(times - first[e])
        vals.append(av["av"][i])
        var.append(av["av_var"][i])
    return EventPanel(
        entity=np.array(ent),
        tau=np.concatenate(tau).astype(int),
        av=np.concatenate(vals),
        var=np.concatenate(var),
        event_years=first,
        multiple_events=multi,
    )


@dataclass
class EventCurve:
    offsets: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    n: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    level: float = 0.95
    meta: dict = field(default_factory=dict)

    def at(self, tau: int) -> int:
        return int(np.flatnonzero(self.offsets == tau)[0])

    def to_csv(self) -> str:
        lines = ["tau,mean,var,n,lo,hi"]
        for row in zip(self.offsets, self.mean, self.var, self.n, self.lo, self.hi):
            t, m, v, n, lo, hi = row
            lines.append(f"{int(t)},{float(m)!r},{float(v)!r},{int(n)},{float(lo)!r},{float(hi)!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "offsets": self.offsets.tolist(),
            "mean": self.mean.tolist(),
            "var": self.var.tolist(),
            "n": self.n.tolist(),
            "ci_level": self.level,
            "conventions": dict(CONVENTIONS),
            **self.meta,
        }


def aggregate_av(ev: EventPanel, level: float = 0.95) -> EventCurve:
    """Average abnormal values per event-time offset with normal confidence bands."""
    if ev.tau.size == 0:
        raise PanelDataError("empty event sample")
    offsets, inv = np.unique(ev.tau, return_inverse=True)
    n = np.bincount(inv)
    mean = np.bincount(inv, weights=ev.av) / n
    var = np.bincount(inv, weights=ev.var) / n.astype(float) ** 2
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * np.sqrt(var)
    meta = {"n_event_entities": len(ev.event_years), "entities_with_multiple_events": ev.multiple_events}
    return EventCurve(offsets, mean, var, n, mean - half, mean + half, level, meta)

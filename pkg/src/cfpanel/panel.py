"""Balanced panel container, CSV ingestion and derived-variable helpers.

A :class:`Panel` stores every column as an ``(N, T)`` float array, rows are
entities and columns are consecutive integer periods.  Derived columns that
need neighbouring periods (lags, leads, growth rates, outflow rates) carry
``NaN`` in the edge periods; :meth:`Panel.complete_window` trims those
periods uniformly across entities so that regression samples stay balanced.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, PanelDataError

ENTITY_COLUMN = "entity"
TIME_COLUMN = "year"

_LAG_RE = re.compile(r"^([LF])(\d+)\.(.+)$")


def parse_lagged_name(name: str) -> tuple[str, int]:
    """Split ``"L2.x"`` into ``("x", 2)`` and ``"F1.x"`` into ``("x", -1)``."""
    m = _LAG_RE.match(name)
    if m is None:
        return name, 0
    k = int(m.group(2))
    return m.group(3), k if m.group(1) == "L" else -k


def shift(values: np.ndarray, k: int) -> np.ndarray:
    """Shift an ``(N, T)`` array along time; positive ``k`` lags, vacated cells are NaN."""
    out = np.full(values.shape, np.nan)
    if k == 0:
        out[:] = values
    elif k > 0:
        out[:, k:] = values[:, :-k]
    else:
        out[:, :k] = values[:, -k:]
    return out


@dataclass(frozen=True)
class Panel:
    """Strongly balanced entity-by-period table of real-valued columns.

    Parameters
    ----------
    entities : sequence of str
        Entity identifiers, one per row of every column array.
    times : sequence of int
        Consecutive integer periods.
    columns : mapping of str to array_like
        Each value has shape ``(len(entities), len(times))``.
    clusters : sequence of str, optional
        Cluster label per entity, defaults to the entity identifier.
    """

    entities: tuple
    times: tuple
    columns: Mapping[str, np.ndarray]
    clusters: tuple = None

    def __post_init__(self):
        entities = tuple(str(e) for e in self.entities)
        times = tuple(int(t) for t in self.times)
        if len(set(entities)) != len(entities):
            raise PanelDataError("duplicate entity identifiers")
        if len(times) == 0 or len(entities) == 0:
            raise PanelDataError("panel must have at least one entity and one period")
        if any(b - a != 1 for a, b in zip(times, times[1:])):
            raise PanelDataError(f"periods must be consecutive integers, got {list(times)}")
        shape = (len(entities), len(times))
        cols = {}
        for name, values in self.columns.items():
            arr = np.array(values, dtype=float)
            if arr.shape != shape:
                raise PanelDataError(f"column {name!r} has shape {arr.shape}, expected {shape}")
            arr.flags.writeable = False
            cols[str(name)] = arr
        clusters = entities if self.clusters is None else tuple(str(c) for c in self.clusters)
        if len(clusters) != len(entities):
            raise PanelDataError("one cluster label per entity is required")
        object.__setattr__(self, "entities", entities)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "clusters", clusters)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def n_obs(self) -> int:
        return self.n_entities * self.n_times

    def __contains__(self, name) -> bool:
        return name in self.columns or parse_lagged_name(name)[0] in self.columns

    def __getitem__(self, name: str) -> np.ndarray:
        """Column as an ``(N, T)`` array; accepts ``L<k>.`` / ``F<k>.`` prefixes.

        A stored column whose literal name carries a prefix (materialized by
        :meth:`select`) takes precedence over shifting its base column.
        """
        if name in self.columns:
            return self.columns[name]
        base, k = parse_lagged_name(name)
        if base not in self.columns:
            raise KeyError(name)
        if k == 0:
            return self.columns[base]
        return shift(self.columns[base], k)

    def stack(self, names: Sequence[str]) -> np.ndarray:
        """Observation matrix ``(N*T, k)`` in entity-major order."""
        if not names:
            return np.empty((self.n_obs, 0))
        return np.column_stack([self[n].reshape(-1) for n in names])

    def entity_index(self) -> np.ndarray:
        """Entity position of each stacked observation."""
        return np.repeat(np.arange(self.n_entities), self.n_times)

    def cluster_index(self) -> np.ndarray:
        """Integer cluster code of each stacked observation."""
        _, codes = np.unique(np.asarray(self.clusters), return_inverse=True)
        return np.repeat(codes, self.n_times)

    def with_columns(self, **new: np.ndarray) -> "Panel":
        cols = dict(self.columns)
        cols.update(new)
        return Panel(self.entities, self.times, cols, self.clusters)

    def select(self, names: Iterable[str]) -> "Panel":
        """Keep only the named columns (lag prefixes are materialized)."""
        return Panel(self.entities, self.times, {n: self[n] for n in names}, self.clusters)

    def subset_entities(self, keep) -> "Panel":
        """Entities selected by boolean mask or integer positions, in the given order."""
        keep = np.asarray(keep)
        idx = np.flatnonzero(keep) if keep.dtype == bool else keep.astype(int)
        return Panel(
            [self.entities[i] for i in idx],
            self.times,
            {k: v[idx] for k, v in self.columns.items()},
            [self.clusters[i] for i in idx],
        )

    def window(self, first: int | None = None, last: int | None = None) -> "Panel":
        """Restrict to periods ``first..last`` inclusive."""
        first = self.times[0] if first is None else int(first)
        last = self.times[-1] if last is None else int(last)
        sel = [j for j, t in enumerate(self.times) if first <= t <= last]
        if not sel:
            raise ConfigError(f"window {first}:{last} does not overlap periods {self.times[0]}..{self.times[-1]}")
        return Panel(
            self.entities,
            self.times[sel[0] : sel[-1] + 1],
            {k: v[:, sel[0] : sel[-1] + 1] for k, v in self.columns.items()},
            self.clusters,
        )

    def complete_window(self, names: Sequence[str]) -> "Panel":
        """Materialize ``names`` and drop edge periods where any of them is absent.

        Periods at either edge with any absent cell are dropped.  An absent
        cell between the first and last complete period is a data error.
        """
        sub = self.select(dict.fromkeys(names))
        if not names:
            return sub
        ok = np.ones(self.n_times, dtype=bool)
        for n in sub.columns:
            ok &= np.isfinite(sub.columns[n]).all(axis=0)
        if not ok.any():
            raise PanelDataError("no period has all required columns present")
        good = np.flatnonzero(ok)
        lo, hi = good[0], good[-1]
        if not ok[lo : hi + 1].all():
            j = lo + int(np.flatnonzero(~ok[lo : hi + 1])[0])
            for n, v in sub.columns.items():
                bad = np.flatnonzero(~np.isfinite(v[:, j]))
                if bad.size:
                    raise PanelDataError(
                        f"absent cell inside sample window: column {n!r}, "
                        f"entity {self.entities[bad[0]]!r}, year {self.times[j]}"
                    )
        return sub.window(self.times[lo], self.times[hi])

    def year_dummies(self, prefix: str = "year_") -> dict[str, np.ndarray]:
        """``T-1`` period indicators with the first period as base."""
        out = {}
        for j, t in enumerate(self.times[1:], start=1):
            d = np.zeros((self.n_entities, self.n_times))
            d[:, j] = 1.0
            out[f"{prefix}{t}"] = d
        return out

    def to_csv(self, dest=None, cluster_column: str | None = "cluster") -> str | None:
        """Write long-format CSV (``entity, year, [cluster], columns...``).

        Returns the text when ``dest`` is None.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.columns)
        header = [ENTITY_COLUMN, TIME_COLUMN]
        if cluster_column:
            header.append(cluster_column)
        w.writerow(header + names)
        for i, e in enumerate(self.entities):
            for j, t in enumerate(self.times):
                row = [e, t]
                if cluster_column:
                    row.append(self.clusters[i])
                row += [_fmt(self.columns[n][i, j]) for n in names]
                w.writerow(row)
        text = buf.getvalue()
        if dest is None:
            return text
        if hasattr(dest, "write"):
            dest.write(text)
        else:
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return None


def _fmt(x: float) -> str:
    if np.isnan(x):
        return ""
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


@dataclass
class FeatureSpec:
    """Roles of panel columns in the two-step estimator.

    ``instruments`` may use lag prefixes, e.g. ``["recalls", "L1.recalls"]``.
    """

    outcome: str
    endogenous: str
    instruments: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    year_dummies: bool = True

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpec":
        unknown = set(d) - {"outcome", "endogenous", "instruments", "controls", "year_dummies"}
        if unknown:
            raise ConfigError(f"unknown FeatureSpec keys: {sorted(unknown)}")
        try:
            return cls(
                outcome=d["outcome"],
                endogenous=d["endogenous"],
                instruments=list(d.get("instruments", [])),
                controls=list(d.get("controls", [])),
                year_dummies=bool(d.get("year_dummies", True)),
            )
        except KeyError as exc:
            raise ConfigError(f"FeatureSpec missing key {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "endogenous": self.endogenous,
            "instruments": list(self.instruments),
            "controls": list(self.controls),
            "year_dummies": self.year_dummies,
        }

    def names(self) -> list[str]:
        return [self.outcome, self.endogenous, *self.instruments, *self.controls]

    def base_names(self) -> list[str]:
        return list(dict.fromkeys(parse_lagged_name(n)[0] for n in self.names()))

    def validate(self, panel: Panel | None = None) -> None:
        if not self.instruments:
            raise ConfigError("at least one excluded instrument is required")
        overlap = set(self.instruments) & set(self.controls)
        if overlap:
            raise ConfigError(f"instruments also listed as controls: {sorted(overlap)}")
        clash = {self.outcome, self.endogenous} & set(self.instruments + self.controls)
        if clash:
            raise ConfigError(f"outcome/endogenous reused as regressors: {sorted(clash)}")
        if panel is not None:
            for n in self.names():
                if n not in panel:
                    raise ConfigError(f"unknown column {parse_lagged_name(n)[0]!r} in spec")


def load_panel(
    source,
    columns: Sequence[str] | None = None,
    spec: FeatureSpec | None = None,
    cluster_column: str | None = None,
) -> Panel:
    """Read a long-format CSV into a balanced :class:`Panel`.

    Parameters
    ----------
    source : path, file object or str
        Delimited text with a header row containing ``entity`` and ``year``.
    columns : sequence of str, optional
        Numeric columns to load.  Defaults to every other column except the
        cluster column.
    spec : FeatureSpec, optional
        Its base column names are added to the required set.
    cluster_column : str, optional
        Column with a cluster label per entity.

    Raises
    ------
    PanelDataError
        Missing header fields, non-numeric cells, duplicate ``(entity, year)``
        rows or an unbalanced layout.
    """
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, encoding="utf-8", newline="") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise PanelDataError("empty input: header row missing") from None
    for req in (ENTITY_COLUMN, TIME_COLUMN):
        if req not in header:
            raise PanelDataError(f"required column {req!r} missing from header")
    if len(set(header)) != len(header):
        raise PanelDataError("duplicate column names in header")
    if cluster_column is not None and cluster_column not in header:
        raise PanelDataError(f"cluster column {cluster_column!r} missing from header")
    skip = {ENTITY_COLUMN, TIME_COLUMN, cluster_column}
    wanted = list(columns) if columns is not None else [h for h in header if h not in skip]
    if spec is not None:
        wanted += [n for n in spec.base_names() if n not in wanted]
    for n in wanted:
        if n not in header:
            raise PanelDataError(f"required column {n!r} missing from header")
    pos = {h: k for k, h in enumerate(header)}

    cells: dict[tuple[str, int], list[float]] = {}
    cluster_of: dict[str, str] = {}
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise PanelDataError(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
        ent = row[pos[ENTITY_COLUMN]].strip()
        try:
            year = int(row[pos[TIME_COLUMN]])
        except ValueError:
            raise PanelDataError(
                f"row {rowno}, column {TIME_COLUMN!r}: non-integer value {row[pos[TIME_COLUMN]]!r}"
            ) from None
        if (ent, year) in cells:
            raise PanelDataError(f"row {rowno}: duplicate (entity, year) = ({ent!r}, {year})")
        vals = []
        for n in wanted:
            raw = row[pos[n]].strip()
            try:
                v = float(raw)
            except ValueError:
                v = np.nan
            if not np.isfinite(v):
                raise PanelDataError(f"row {rowno}, column {n!r}: non-numeric value {raw!r}")
            vals.append(v)
        cells[(ent, year)] = vals
        if cluster_column is not None:
            lab = row[pos[cluster_column]].strip()
            if cluster_of.setdefault(ent, lab) != lab:
                raise PanelDataError(f"row {rowno}: entity {ent!r} assigned to several clusters")
    if not cells:
        raise PanelDataError("no data rows")

    entities = sorted({e for e, _ in cells})
    years = sorted({t for _, t in cells})
    times = list(range(years[0], years[-1] + 1))
    for e in entities:
        for t in times:
            if (e, t) not in cells:
                raise PanelDataError(f"unbalanced panel: missing (entity, year) = ({e!r}, {t})")
    data = np.empty((len(wanted), len(entities), len(times)))
    for i, e in enumerate(entities):
        for j, t in enumerate(times):
            data[:, i, j] = cells[(e, t)]
    clusters = [cluster_of[e] for e in entities] if cluster_column is not None else None
    return Panel(entities, times, {n: data[k] for k, n in enumerate(wanted)}, clusters)


class FilterResult(NamedTuple):
    panel: Panel
    dropped: tuple
    dropped_fraction: float


def filter_nonzero_outcome(panel: Panel, outcome: str) -> FilterResult:
    """Keep entities whose outcome is positive in at least one period.

    Entities with an all-zero count history carry no information for the
    conditional Poisson likelihood.
    """
    y = panel[outcome]
    if not np.isfinite(y).all() or (y < 0).any() or not np.all(y == np.round(y)):
        raise PanelDataError(f"outcome {outcome!r} must be nonnegative integers")
    keep = (y > 0).any(axis=1)
    if not keep.any():
        raise PanelDataError("no informative entities: every entity has an all-zero outcome")
    dropped = tuple(e for e, k in zip(panel.entities, keep) if not k)
    out = panel if keep.all() else panel.subset_entities(keep)
    return FilterResult(out, dropped, len(dropped) / panel.n_entities)


def normalize_recalls(recalls, n_products) -> np.ndarray:
    """Recalls per 100 products; cells without recalls are zero."""
    m = np.asarray(recalls, dtype=float)
    p = np.asarray(n_products, dtype=float)
    m, p = np.broadcast_arrays(m, p)
    bad = (m > 0) & ~(p > 0)
    if bad.any():
        raise PanelDataError("recalls recorded where the product count is zero")
    out = np.zeros(m.shape)
    pos = m > 0
    out[pos] = m[pos] / p[pos] * 100.0
    return out


def hhi(shares) -> float:
    """Herfindahl-Hirschman index of market shares."""
    s = np.asarray(shares, dtype=float)
    if s.size == 0 or (s < 0).any():
        raise ValueError("shares must be a nonempty vector of nonnegative values")
    if abs(s.sum() - 1.0) > 1e-9:
        raise ValueError(f"shares sum to {s.sum()!r}, not 1")
    return float(np.dot(s, s))


def outflow_rate(lost_next, total_prev):
    """Products lost next period over products in the previous period."""
    k = np.asarray(lost_next, dtype=float)
    p = np.asarray(total_prev, dtype=float)
    if np.any(p <= 0):
        raise PanelDataError("outflow rate undefined: previous-period product count is zero")
    r = k / p
    return float(r) if r.ndim == 0 else r


def outflow_rate_column(panel: Panel, lost: str, total: str) -> np.ndarray:
    """``lost[t+1] / total[t-1]`` as an ``(N, T)`` array with absent edge periods.

    ``lost`` counts products present at ``t-1`` and gone at ``t`` (recorded in
    period ``t``).
    """
    k_next = panel[f"F1.{lost}"]
    p_prev = panel[f"L1.{total}"]
    out = np.full(k_next.shape, np.nan)
    ok = np.isfinite(k_next) & np.isfinite(p_prev)
    out[ok] = outflow_rate(k_next[ok], p_prev[ok])
    return out


def detrend_log_diff(series) -> np.ndarray:
    """First difference of the log of a positive series (length ``T-1``)."""
    y = np.asarray(series, dtype=float)
    if np.any(~(y > 0)):
        raise ValueError("log-difference requires strictly positive values")
    return np.diff(np.log(y), axis=-1)


def log_diff_column(panel: Panel, name: str) -> np.ndarray:
    """Per-entity log growth as an ``(N, T)`` array, first period absent."""
    out = np.full((panel.n_entities, panel.n_times), np.nan)
    out[:, 1:] = detrend_log_diff(panel[name])
    return out


def within_demean(values, entity) -> np.ndarray:
    """Subtract per-entity means from each column.

    ``values`` is ``(n,)`` or ``(n, k)``; ``entity`` holds integer codes.
    """
    x = np.asarray(values, dtype=float)
    g = np.asarray(entity)
    _, codes = np.unique(g, return_inverse=True)
    counts = np.bincount(codes).astype(float)
    x2 = x.reshape(len(codes), -1)
    means = np.stack([np.bincount(codes, weights=x2[:, j]) for j in range(x2.shape[1])], axis=1)
    means /= counts[:, None]
    out = x2 - means[codes]
    # second pass removes rounding residue so group means are ~1e-16
    means2 = np.stack([np.bincount(codes, weights=out[:, j]) for j in range(out.shape[1])], axis=1)
    out -= (means2 / counts[:, None])[codes]
    return out.reshape(x.shape)

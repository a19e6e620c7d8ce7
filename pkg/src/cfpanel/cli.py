"""Command-line runs: ``cfpanel <subcommand> --input ... --out DIR``.

Every run writes ``report.json``, one or more CSV tables, optional SVG
figures and a ``run.json`` manifest (resolved config, its SHA-256, seed,
library version and artifact digests) into the output directory.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure.  On failure the first stderr line is machine parsable::

    cfpanel-error code=2 kind=data reason="unbalanced panel: ..."
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, _svg
from . import eventstudy as es
from . import linfe
from .cfiv import bootstrap_instrument_tstat, fit_naive, run_cf_iv
from .dgp import (
    AR1Params,
    DGPParams,
    EventParams,
    LifetimeParams,
    monte_carlo,
    population_first_stage_f,
    simulate_ar1_panel,
    simulate_event_panel,
    simulate_lifetimes,
    simulate_panel,
)
from .dyngmm import GMMSpec, ar_test, fit_system_gmm, hansen_j
from .errors import ConfigError, NumericalError, PanelDataError
from .panel import FeatureSpec, load_panel, log_diff_column, parse_lagged_name
from .survival import compare_groups, kaplan_meier, read_survival_csv

THREADS_ENV = "CFPANEL_THREADS"
LOCK_NAME = ".cfpanel.lock"

CONVENTIONS = {
    "within_ols": dict(linfe.CONVENTIONS),
    "poisson_cov": "A^-1 B A^-1 with entity-clustered scores, no small-sample factor",
    "second_stage_se": "no correction for the estimated first-stage residual",
    "event_average": dict(es.CONVENTIONS),
    "gmm": "one-step robust or two-step uncorrected SEs; Hansen J at the two-step estimate",
}

SUBCOMMANDS = ("first-stage", "cf-poisson", "event-study", "survival", "gmm", "simulate", "monte-carlo")

DEFAULTS = {
    "alpha": 0.05,
    "seed": 0,
    "reps": 0,
    "window": None,
    "cluster": None,
    "spec": {
        "outcome": "trials",
        "endogenous": "log_sales",
        "instruments": ["recalls_norm", "L1.recalls_norm"],
        "controls": ["x1"],
        "year_dummies": True,
    },
    "event": {
        "outcome": "growth",
        "aggregate": "sector_growth",
        "event": "recall",
        "controls": [],
        "log_diff": False,
        "level": 0.95,
        "parameter_uncertainty": True,
    },
    "survival": {"duration": "duration", "event": "event", "group": "group", "groups": None},
    "gmm": {"dep": "y", "exog": ["x"], "step": "two"},
    "model": "cf",
    "pipeline": "cf",
    "dgp": {},
}


# ----------------------------------------------------------------------------
# config


def _parse_window(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        lo, hi = text
    else:
        parts = str(text).split(":")
        if len(parts) != 2:
            raise ConfigError(f"window must look like FROM:TO, got {text!r}")
        lo, hi = parts
    try:
        lo = None if lo in ("", None) else int(lo)
        hi = None if hi in ("", None) else int(hi)
    except ValueError:
        raise ConfigError(f"window bounds must be integers, got {text!r}") from None
    if lo is not None and hi is not None and lo > hi:
        raise ConfigError(f"empty window {lo}:{hi}")
    return [lo, hi]


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then command-line flags."""
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(user) - set(DEFAULTS) - {"input"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if user.get("spec") is not None:
            cfg["spec"] = {}
        cfg = _merge(cfg, user)
    for key in ("alpha", "seed", "reps", "model", "pipeline", "input"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if args.window is not None:
        cfg["window"] = args.window
    cfg["window"] = _parse_window(cfg.get("window"))
    if getattr(args, "collapse_instruments", False):
        cfg["gmm"]["collapse"] = True
    if not 0 < float(cfg["alpha"]) < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {cfg['alpha']}")
    cfg["subcommand"] = args.subcommand
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(_dumps(cfg).encode()).hexdigest()


def n_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


# ----------------------------------------------------------------------------
# output


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_default) + "\n"


class Output:
    """Output directory guarded by a lockfile; collects artifact digests."""

    def __init__(self, path):
        self.path = Path(path)
        self.files: dict[str, str] = {}
        self._lock = None

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        lock = self.path / LOCK_NAME
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory is locked by another run: {lock}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self._lock = lock
        return self

    def __exit__(self, *exc):
        if self._lock is not None:
            self._lock.unlink(missing_ok=True)
        return False

    def write(self, name: str, text: str) -> None:
        (self.path / name).write_text(text, encoding="utf-8", newline="")
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()

    def json(self, name: str, obj) -> None:
        self.write(name, _dumps(obj))


def _table(header, rows) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(_cell(v) for v in r))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _coef_rows(names, params, cov):
    se = np.sqrt(np.diag(cov))
    return [(n, b, s, b / s if s > 0 else None) for n, b, s in zip(names, params, se)]


# ----------------------------------------------------------------------------
# inputs


def _input_path(cfg) -> Path:
    src = cfg.get("input")
    if not src:
        raise ConfigError("--input is required for this subcommand")
    path = Path(src)
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    return path


def _header(path: Path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return [h.strip() for h in next(csv.reader(fh), [])]


def _load(cfg, columns=(), spec=None):
    path = _input_path(cfg)
    cluster = cfg.get("cluster")
    if cluster is None and "cluster" in _header(path):
        cluster = "cluster"
    header = _header(path)
    names = list(columns) + (spec.base_names() if spec else [])
    for n in names:
        if n not in header:
            raise ConfigError(f"unknown column {n!r}: not in {path.name}")
    panel = load_panel(path, columns=list(columns), spec=spec, cluster_column=cluster)
    if spec is not None:
        # lags may reach back before the window; build them on the full panel
        shifted = [n for n in spec.names() if parse_lagged_name(n)[1] != 0]
        panel = panel.with_columns(**{n: panel[n] for n in shifted})
    if cfg["window"] is not None:
        panel = panel.window(*cfg["window"])
    return panel


def _feature_spec(cfg) -> FeatureSpec:
    spec = FeatureSpec.from_dict(cfg["spec"])
    spec.validate()
    return spec


# ----------------------------------------------------------------------------
# subcommands


def cmd_first_stage(cfg, out: Output) -> dict:
    spec = _feature_spec(cfg)
    panel = _load(cfg, spec=spec)
    sample = panel.complete_window(spec.names())
    fit = linfe.fit_within_ols(
        sample, spec.endogenous, [*spec.instruments, *spec.controls], spec.year_dummies, drop_absorbed=False
    )
    cov = linfe.cluster_robust_cov(fit)
    f = linfe.instrument_f_stat(fit, cov, spec.instruments)
    out.write("coefficients.csv", _table(["name", "coef", "se", "t"], _coef_rows(fit.names, fit.params, cov)))
    return {
        "first_stage": fit.to_dict(cov),
        "instrument_f": {
            "instruments": list(spec.instruments),
            "statistic": f.statistic,
            "pvalue": f.pvalue,
            "df": [f.df_num, f.df_denom],
            "reject_irrelevance": bool(f.pvalue < cfg["alpha"]),
        },
    }


def cmd_cf_poisson(cfg, out: Output) -> dict:
    spec = _feature_spec(cfg)
    panel = _load(cfg, spec=spec)
    res = run_cf_iv(panel, spec, alpha=cfg["alpha"])
    naive, ncov = fit_naive(panel, spec)
    ss = res.second_stage
    rows = [("second", *r) for r in _coef_rows(ss.names, ss.params, res.second_stage_cov)]
    rows += [("first", *r) for r in _coef_rows(res.first_stage.names, res.first_stage.params, res.first_stage_cov)]
    rows += [("naive", *r) for r in _coef_rows(naive.names, naive.params, ncov)]
    out.write("coefficients.csv", _table(["stage", "name", "coef", "se", "t"], rows))
    report = res.to_dict()
    report["naive"] = naive.to_dict(ncov)
    report["beta"] = res.beta
    if int(cfg["reps"]) > 0:
        boot = bootstrap_instrument_tstat(panel, spec, reps=int(cfg["reps"]), seed=int(cfg["seed"]), n_jobs=n_threads())
        report["bootstrap"] = boot.to_dict()
        out.write("bootstrap.csv", boot.to_csv())
    return report


def cmd_event_study(cfg, out: Output) -> dict:
    ev = cfg["event"]
    y, agg, flag = ev["outcome"], ev["aggregate"], ev["event"]
    controls = list(ev.get("controls", []))
    panel = _load(cfg, columns=dict.fromkeys([y, agg, flag, *controls]))
    if ev.get("log_diff"):
        panel = panel.with_columns(**{y: log_diff_column(panel, y), agg: log_diff_column(panel, agg)})
    sample = panel.complete_window([y, agg, flag, *controls])
    years, counts = es.event_years_from(sample, flag)
    pot = es.fit_potential(sample, y, agg, controls, parameter_uncertainty=bool(ev.get("parameter_uncertainty", True)))
    av = es.abnormal_values(pot)
    curve = es.aggregate_av(es.recenter_event_time(av, years), level=float(ev.get("level", 0.95)))
    curve.meta["entities_with_multiple_events"] = sum(c > 1 for c in counts.values())
    out.write("event_curve.csv", curve.to_csv())
    out.write(
        "event_curve.svg",
        _svg.line_with_band(curve.offsets, curve.mean, curve.lo, curve.hi,
                            title="Average abnormal value", xlabel="event time", ylabel=y),
    )
    j = pot.fit
    return {
        "potential_fit": j.to_dict(j.classical_cov()),
        "curve": curve.to_dict(),
    }


def cmd_survival(cfg, out: Output) -> dict:
    sc = cfg["survival"]
    path = _input_path(cfg)
    groups = read_survival_csv(path, sc["duration"], sc["event"], sc["group"])
    labels = sc.get("groups") or list(groups)
    missing = [g for g in labels if g not in groups]
    if missing:
        raise ConfigError(f"unknown survival groups: {missing}")
    curves = {g: kaplan_meier(*groups[g], group=g) for g in labels}
    report = {"curves": {g: c.to_dict() for g, c in curves.items()}}
    if len(labels) >= 2:
        report["comparison"] = compare_groups(curves[labels[0]], curves[labels[1]])
    text = "".join(c.to_csv() if k == 0 else c.to_csv().split("\n", 1)[1] for k, c in enumerate(curves.values()))
    out.write("survival.csv", text)
    out.write(
        "survival.svg",
        _svg.step_plot([(g, c.times, c.survival) for g, c in curves.items()],
                       title="Kaplan-Meier survival", xlabel="years", ylabel="S(t)"),
    )
    return report


def cmd_gmm(cfg, out: Output) -> dict:
    g = dict(cfg["gmm"])
    step = g.pop("step", "two")
    spec = GMMSpec.from_dict(g)
    cols = dict.fromkeys([spec.dep, *spec.exog, *spec.endogenous, *spec.extra_instruments])
    panel = _load(cfg, columns=cols)
    fit = fit_system_gmm(panel, spec, step=step)
    report = {"fit": fit.to_dict(), "spec": spec.to_dict()}
    try:
        hj = hansen_j(fit)
        report["hansen"] = {"statistic": hj.statistic, "df": hj.df, "pvalue": hj.pvalue}
    except (ConfigError, NumericalError) as exc:
        report["hansen"] = {"undefined": str(exc)}
    report["ar_tests"] = {}
    for m in (1, 2, 3, 4):
        try:
            r = ar_test(fit, m)
            report["ar_tests"][f"AR({m})"] = {"z": r.z, "pvalue": r.pvalue}
        except (ConfigError, NumericalError) as exc:
            report["ar_tests"][f"AR({m})"] = {"undefined": str(exc)}
    out.write("coefficients.csv", _table(["name", "coef", "se", "t"], _coef_rows(fit.names, fit.params, fit.cov)))
    return report


_MODELS = {
    "cf": (DGPParams, simulate_panel),
    "ar1": (AR1Params, simulate_ar1_panel),
    "event": (EventParams, simulate_event_panel),
    "lifetimes": (LifetimeParams, simulate_lifetimes),
}


def cmd_simulate(cfg, out: Output) -> dict:
    model = cfg["model"]
    if model not in _MODELS:
        raise ConfigError(f"unknown model {model!r}; choose from {sorted(_MODELS)}")
    cls, sim = _MODELS[model]
    params = cls.from_dict({**cfg["dgp"], "seed": int(cfg["seed"])})
    data = sim(params)
    report = {"model": model, "params": params.to_dict()}
    if model == "lifetimes":
        rows = [(round(float(d), 12), int(e), g) for g, (ds, evs) in data.items() for d, e in zip(ds, evs)]
        out.write("lifetimes.csv", _table(["duration", "event", "group"], rows))
        return report
    out.write("panel.csv", data.to_csv())
    report["shape"] = [data.n_entities, data.n_times]
    if model == "cf":
        report["population_first_stage_f"] = population_first_stage_f(params)
    return report


def cmd_monte_carlo(cfg, out: Output) -> dict:
    pipeline = cfg["pipeline"]
    cls = AR1Params if pipeline == "gmm" else DGPParams
    reps = int(cfg["reps"]) or 500
    params = cls.from_dict({**cfg["dgp"], "seed": int(cfg["seed"])})
    mc = monte_carlo(params, pipeline, reps=reps, n_jobs=n_threads())
    out.write("replications.csv", mc.to_csv())
    report = mc.to_dict()
    report["params"] = params.to_dict()
    report["alpha"] = cfg["alpha"]
    report["rejection_rates"] = {
        k: mc.rate(k, cfg["alpha"]) for k in mc.estimates if k.startswith("p_")
    }
    if pipeline == "cf":
        report["coverage95"] = {
            "cf": mc.coverage("beta_cf", "se_cf", params.beta1),
            "naive": mc.coverage("beta_naive", "se_naive", params.beta1),
        }
    if pipeline == "first-stage":
        report["share_f_above_10"] = float(np.mean(mc.estimates["f_stat"] > 10))
    return report


COMMANDS = {
    "first-stage": cmd_first_stage,
    "cf-poisson": cmd_cf_poisson,
    "event-study": cmd_event_study,
    "survival": cmd_survival,
    "gmm": cmd_gmm,
    "simulate": cmd_simulate,
    "monte-carlo": cmd_monte_carlo,
}


# ----------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cfpanel", description="Fixed-effects count models with a control-function IV.")
    p.add_argument("--version", action="version", version=f"cfpanel {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--input", help="input CSV")
        s.add_argument("--config", help="JSON config; flags override its values")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--reps", type=int, help="bootstrap or Monte Carlo replications")
        s.add_argument("--alpha", type=float)
        s.add_argument("--window", help="first and last year, FROM:TO")
        s.add_argument("--collapse-instruments", action="store_true")
        if name == "simulate":
            s.add_argument("--model", choices=sorted(_MODELS))
        if name == "monte-carlo":
            s.add_argument("--pipeline", choices=["cf", "first-stage", "gmm"])
    return p


_CODES = {ConfigError: (1, "config"), PanelDataError: (2, "data"), NumericalError: (3, "numerical")}


def _fail(exc) -> int:
    for cls, (code, kind) in _CODES.items():
        if isinstance(exc, cls):
            break
    reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    print(f"cfpanel-error code={code} kind={kind} reason={json.dumps(reason)}", file=sys.stderr)
    print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        with Output(args.out) as out:
            report = COMMANDS[args.subcommand](cfg, out)
            report["conventions"] = CONVENTIONS
            report["version"] = __version__
            out.json("report.json", report)
            manifest = {
                "subcommand": args.subcommand,
                "config": cfg,
                "config_sha256": config_hash(cfg),
                "seed": int(cfg["seed"]),
                "version": __version__,
                "artifacts": dict(sorted(out.files.items())),
            }
            if cfg.get("input"):
                data = Path(cfg["input"]).read_bytes()
                manifest["input_sha256"] = hashlib.sha256(data).hexdigest()
            out.json("run.json", manifest)
    except (ConfigError, PanelDataError, NumericalError) as exc:
        return _fail(exc)
    except (FileNotFoundError, KeyError) as exc:
        return _fail(ConfigError(str(exc)))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Two-step control-function IV for fixed-effects Poisson models.

Step 1 fits the reduced form of the endogenous regressor by within OLS and
keeps the fixed-effects residuals.  Step 2 adds those residuals to a
conditional-ML fixed-effects Poisson regression; a robust Wald test on their
coefficient tests for idiosyncratic endogeneity.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, PanelDataError
from .linfe import FEOLSFit, FTestResult, cluster_robust_cov, fit_within_ols, instrument_f_stat
from .panel import FeatureSpec, Panel, filter_nonzero_outcome
from .poissonfe import FEPoissonFit, WaldResult, fit_fe_poisson, poisson_cluster_cov, wald_test

logger = logging.getLogger(__name__)

RESID_COLUMN = "cf_resid"


@dataclass
class CFIVResult:
    spec: FeatureSpec
    first_stage: FEOLSFit
    first_stage_cov: np.ndarray
    f_test: FTestResult
    second_stage: FEPoissonFit
    second_stage_cov: np.ndarray
    wald: WaldResult
    alpha: float
    dropped_entities: tuple = ()
    dropped_fraction: float = 0.0

    @property
    def rho(self) -> float:
        return float(self.second_stage.params[self.second_stage.index(RESID_COLUMN)])

    @property
    def beta(self) -> float:
        return float(self.second_stage.params[self.second_stage.index(self.spec.endogenous)])

    def se(self, name: str) -> float:
        j = self.second_stage.index(name)
        return float(np.sqrt(self.second_stage_cov[j, j]))

    @property
    def rho_tstat(self) -> float:
        return self.rho / self.se(RESID_COLUMN)

    @property
    def endogenous(self) -> bool:
        return self.wald.pvalue < self.alpha

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "sample": {
                "dropped_all_zero_entities": list(self.dropped_entities),
                "dropped_fraction": self.dropped_fraction,
            },
            "first_stage": {
                **self.first_stage.to_dict(self.first_stage_cov),
                "instrument_f": {
                    "statistic": self.f_test.statistic,
                    "pvalue": self.f_test.pvalue,
                    "df": [self.f_test.df_num, self.f_test.df_denom],
                },
            },
            "second_stage": self.second_stage.to_dict(self.second_stage_cov),
            "endogeneity_test": {
                "coefficient": RESID_COLUMN,
                "rho": self.rho,
                "statistic": self.wald.statistic,
                "pvalue": self.wald.pvalue,
                "alpha": self.alpha,
                "reject_exogeneity": bool(self.endogenous),
            },
            "conventions": {
                "second_stage_se": "cluster-robust sandwich, no first-stage correction",
            },
        }


def run_cf_iv(panel: Panel, spec: FeatureSpec, alpha: float = 0.05, drop_all_zero: bool = True) -> CFIVResult:
    """Run both steps of the control-function estimator.

    Parameters
    ----------
    panel : Panel
    spec : FeatureSpec
        Instruments enter only the first stage.
    alpha : float
        Level of the endogeneity verdict.
    drop_all_zero : bool
        Remove entities with an all-zero outcome over the sample window before
        both stages (they are uninformative for the conditional likelihood).
        The dropped entities are recorded in the result.
    """
    spec.validate(panel)
    exog = list(spec.controls)
    sample = panel.complete_window([*spec.names()])
    dropped, frac = (), 0.0
    if drop_all_zero:
        sample, dropped, frac = filter_nonzero_outcome(sample, spec.outcome)

    fs = fit_within_ols(
        sample, spec.endogenous, [*spec.instruments, *exog], year_dummies=spec.year_dummies, drop_absorbed=False
    )
    fs_cov = cluster_robust_cov(fs)
    f_test = instrument_f_stat(fs, fs_cov, spec.instruments)

    if fs.times != sample.times or fs.entities != sample.entities:
        raise PanelDataError("first-stage sample does not match the common sample")
    stage2 = sample.with_columns(**{RESID_COLUMN: fs.resid_panel()})
    ss = fit_fe_poisson(stage2, spec.outcome, [spec.endogenous, *exog, RESID_COLUMN], year_dummies=spec.year_dummies)
    if ss.times != fs.times or ss.entities != fs.entities:
        raise PanelDataError("second-stage sample differs from the first stage")
    ss_cov = poisson_cluster_cov(ss)
    w = wald_test(ss, ss_cov, RESID_COLUMN, 0.0)
    return CFIVResult(spec, fs, fs_cov, f_test, ss, ss_cov, w, alpha, dropped, frac)


def fit_naive(panel: Panel, spec: FeatureSpec, drop_all_zero: bool = True):
    """FE Poisson treating the endogenous regressor as exogenous, same sample as :func:`run_cf_iv`."""
    sample = panel.complete_window([*spec.names()])
    if drop_all_zero:
        sample = filter_nonzero_outcome(sample, spec.outcome).panel
    fit = fit_fe_poisson(sample, spec.outcome, [spec.endogenous, *spec.controls], year_dummies=spec.year_dummies)
    return fit, poisson_cluster_cov(fit)


def resample_entities(panel: Panel, rng: np.random.Generator) -> Panel:
    """Draw entities with replacement; duplicates become distinct entities and clusters."""
    idx = rng.integers(0, panel.n_entities, panel.n_entities)
    labels = [f"b{k}:{panel.entities[i]}" for k, i in enumerate(idx)]
    return Panel(labels, panel.times, {n: v[idx] for n, v in panel.columns.items()}, labels)


@dataclass
class BootstrapResult:
    """Entity-bootstrap distribution of the control-function t-statistic.

    ``tstats`` has one row per successful replication and columns for the
    full instrument set and for each single-instrument variant.
    """

    reps: int
    seed: int
    variants: list
    estimate: float
    tstats: np.ndarray
    rhos: np.ndarray
    failures: int
    replicate_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def bootstrap_se(self) -> float:
        return float(np.std(self.rhos[:, 0], ddof=1))

    @property
    def bootstrap_t(self) -> float:
        """Full-sample residual coefficient over its bootstrap standard error."""
        return self.estimate / self.bootstrap_se

    @property
    def mean_abs_diff(self) -> float:
        """Mean |t(variant A) - t(variant B)| across replications."""
        return float(np.mean(np.abs(self.tstats[:, 1] - self.tstats[:, 2])))

    def to_dict(self) -> dict:
        return {
            "reps": self.reps,
            "seed": self.seed,
            "failures": self.failures,
            "variants": list(self.variants),
            "full_sample_rho": self.estimate,
            "bootstrap_se_rho": self.bootstrap_se,
            "bootstrap_t": self.bootstrap_t,
            "mean_t": dict(zip(self.variants, map(float, self.tstats.mean(axis=0)))),
            "instrument_swap": {
                "label": "invariance of the residual t-statistic to the instrument used",
                "mean_abs_t_difference": self.mean_abs_diff,
            },
        }

    def to_csv(self) -> str:
        head = ["rep"] + [f"t_{v}" for v in self.variants] + [f"rho_{v}" for v in self.variants]
        lines = [",".join(head)]
        for r, t, c in zip(self.replicate_ids, self.tstats, self.rhos):
            lines.append(",".join([str(int(r))] + [repr(float(x)) for x in (*t, *c)]))
        return "\n".join(lines) + "\n"


def _one_replication(args):
    panel, specs, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    bs = resample_entities(panel, rng)
    out = []
    for s in specs:
        r = run_cf_iv(bs, s, drop_all_zero=True)
        out.append((r.rho_tstat, r.rho))
    return out


def bootstrap_instrument_tstat(
    panel: Panel,
    spec: FeatureSpec,
    reps: int = 1000,
    seed: int = 0,
    n_jobs: int = 1,
    max_failure_rate: float = 0.05,
) -> BootstrapResult:
    """Entity (cluster) bootstrap of the residual t-statistic.

    Every replication resamples entities with replacement and runs the
    two-step estimator three times: with all instruments, and once with each
    of the first two instruments alone.  Replication ``r`` uses child ``r`` of
    ``numpy.random.SeedSequence(seed)``, so results do not depend on the
    execution order or on ``n_jobs``.
    """
    if len(spec.instruments) < 2:
        raise ConfigError("the instrument-swap bootstrap needs at least two instruments")
    if reps < 100:
        raise ConfigError("reps must be at least 100")
    base = panel.complete_window([*spec.names()])
    full = run_cf_iv(base, spec)
    a, b = spec.instruments[:2]
    specs = [
        spec,
        FeatureSpec(spec.outcome, spec.endogenous, [a], list(spec.controls), spec.year_dummies),
        FeatureSpec(spec.outcome, spec.endogenous, [b], list(spec.controls), spec.year_dummies),
    ]
    children = np.random.SeedSequence(seed).spawn(reps)
    tasks = [(base, specs, c) for c in children]

    def run_all():
        if n_jobs > 1:
            with ProcessPoolExecutor(max_workers=n_jobs) as ex:
                yield from ex.map(_safe_replication, tasks, chunksize=max(1, reps // (4 * n_jobs)))
        else:
            yield from map(_safe_replication, tasks)

    ts, rs, ids, failures = [], [], [], 0
    for r, res in enumerate(run_all()):
        if res is None:
            failures += 1
            continue
        ts.append([t for t, _ in res])
        rs.append([c for _, c in res])
        ids.append(r)
    if failures > max_failure_rate * reps:
        raise NumericalError(f"{failures} of {reps} bootstrap replications failed")
    tstats = np.array(ts)
    if not np.isfinite(tstats).all():
        raise NumericalError("non-finite bootstrap statistics")
    return BootstrapResult(
        reps=reps,
        seed=seed,
        variants=["all", a, b],
        estimate=full.rho,
        tstats=tstats,
        rhos=np.array(rs),
        failures=failures,
        replicate_ids=np.array(ids, dtype=int),
    )


def _safe_replication(args):
    try:
        out = _one_replication(args)
    except (NumericalError, PanelDataError) as exc:
        logger.debug("bootstrap replication failed: %s", exc)
        return None
    if not all(math.isfinite(t) for t, _ in out):
        return None
    return out

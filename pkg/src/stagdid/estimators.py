"""scikit-learn style front ends for the staggered and trend-comparison estimators."""

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from stagdid.aggregate import aggregate_all
from stagdid.csdid import gtatt_table, overlap_report
from stagdid.errors import DidError
from stagdid.inference import apply_bootstrap, bootstrap_inference
from stagdid.panel import NEVER, build_cohort_design, restrict
from stagdid.sensitivity import bh_compare, robust_intervals
from stagdid.validation import check_flavor, check_n_bootstrap, check_panel, check_seed


class CallawaySantAnna(BaseEstimator):
    """Group-time average treatment effects for staggered adoption.

    Every (g, t) cell compares cohort ``g`` with never-treated units, using
    ``g - 1`` as base period after adoption and ``t - 1`` before it
    (placebo cells). Covariates are taken at the base period.

    Parameters
    ----------
    estimation_method : {"dr", "ipw", "or"}, default="dr"
        Doubly robust, inverse probability weighting, or outcome regression.
    covariates : list of str, optional
        Panel covariate names for the nuisance models.
    n_bootstrap : int, default=0
        Stratified unit bootstrap replicates; 0 keeps the analytic
        influence-function standard errors.
    seed : int, optional
        Required when ``n_bootstrap > 0``.
    n_jobs : int, default=1
        Workers for the bootstrap. Results do not depend on it.
    unit, period, outcome, cohort : str
        Column names used when ``fit`` receives a DataFrame.

    Attributes
    ----------
    panel_ : PanelDataset
    design_ : CohortDesign
    cells_ : list of GtattCell
    aggregates_ : dict of AggregationResult
        Keyed ``"group:<g>"``, ``"overall"``, ``"simple"``, ``"event:<e>"``.
    bootstrap_ : BootstrapResult or None
    """

    def __init__(self, estimation_method="dr", covariates=None, n_bootstrap=0, seed=None, n_jobs=1,
                 unit="unit", period="period", outcome="outcome", cohort="cohort"):
        self.estimation_method = estimation_method
        self.covariates = covariates
        self.n_bootstrap = n_bootstrap
        self.seed = seed
        self.n_jobs = n_jobs
        self.unit = unit
        self.period = period
        self.outcome = outcome
        self.cohort = cohort

    def fit(self, panel, y=None):
        flavor = check_flavor(self.estimation_method)
        B = check_n_bootstrap(self.n_bootstrap)
        covs = list(self.covariates or [])
        panel = check_panel(panel, covs, self.unit, self.period, self.outcome, self.cohort)
        design = build_cohort_design(panel)
        cells = gtatt_table(panel, design, covs, flavor)
        aggs = aggregate_all(cells, design)
        self.bootstrap_ = None
        if B:
            seed = check_seed(self.seed)
            self.bootstrap_ = bootstrap_inference(panel, design, covs, flavor, B, seed, self.n_jobs)
            cells, aggs = apply_bootstrap(cells, aggs, self.bootstrap_)
        self.panel_, self.design_, self.cells_, self.aggregates_ = panel, design, cells, aggs
        return self

    def aggregate(self, kind="overall", key=None):
        check_is_fitted(self, "aggregates_")
        label = kind if key is None else f"{kind}:{key}"
        try:
            return self.aggregates_[label]
        except KeyError:
            raise DidError("MISSING_CELL", f"no aggregate {label!r}") from None

    @property
    def att_(self):
        return self.aggregate("overall").estimate

    def cell(self, g, t):
        check_is_fitted(self, "cells_")
        for c in self.cells_:
            if c.g == g and c.t == t:
                return c
        raise DidError("MISSING_CELL", f"no cell ({g}, {t})")

    def summary(self):
        """Cells as a DataFrame, one row per (g, t)."""
        check_is_fitted(self, "cells_")
        return pd.DataFrame([
            {"g": c.g, "t": c.t, "e": c.e, "estimate": c.estimate, "se": c.se, "ci_lo": c.ci[0],
             "ci_hi": c.ci[1], "p": c.p_value, "flavor": c.flavor, "flags": ";".join(c.flags)}
            for c in self.cells_
        ])

    def event_study(self):
        check_is_fitted(self, "aggregates_")
        rows = []
        for label, r in self.aggregates_.items():
            if r.kind == "event":
                rows.append({"e": r.key, "estimate": r.estimate, "se": r.se, "ci_lo": r.ci[0],
                             "ci_hi": r.ci[1], "p": r.p_value, "ci_pct_lo": r.ci_percentile[0],
                             "ci_pct_hi": r.ci_percentile[1], "n_cohorts": len(r.weights)})
        return pd.DataFrame(rows).sort_values("e").reset_index(drop=True)

    def overlap(self, eps=0.01):
        check_is_fitted(self, "cells_")
        return overlap_report(self.cells_, eps)

    def robust_intervals(self, e, mbar_grid, m_grid):
        """Relative-magnitude and smoothness grids for event time ``e``."""
        check_is_fitted(self, "aggregates_")
        return robust_intervals(self.aggregates_, e, mbar_grid, m_grid)


class BilinskiHatfield(BaseEstimator):
    """Average effect with and without an extrapolated linear trend difference.

    Parameters
    ----------
    covariates : list of str, optional
    cohort : int, optional
        Treated cohort to compare with the never treated; required when the
        panel has several.
    n_bootstrap : int, default=0
        Shared unit bootstrap for all four quantities; 0 uses the stacked
        cluster-robust sandwich.
    seed : int, optional
    """

    def __init__(self, covariates=None, cohort=None, n_bootstrap=0, seed=None):
        self.covariates = covariates
        self.cohort = cohort
        self.n_bootstrap = n_bootstrap
        self.seed = seed

    def fit(self, panel, y=None):
        covs = list(self.covariates or [])
        panel = check_panel(panel, covs)
        cohorts = sorted(int(g) for g in set(np.unique(panel.cohort)) - {NEVER})
        g = self.cohort
        if g is None:
            if len(cohorts) != 1:
                raise DidError("MULTIPLE_COHORTS", f"choose one of cohorts {cohorts}")
            g = cohorts[0]
        if len(cohorts) > 1:
            panel = restrict(panel, cohorts=[g])
        self.result_ = bh_compare(panel, covs, self.n_bootstrap, self.seed)
        return self

"""Two-way fixed effects baselines and the percentage-increase translation."""

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.special import ndtr
from sklearn.base import BaseEstimator

from stagdid.errors import DidError
from stagdid.numkit import cluster_robust_vcov, demean_two_way, ols_fit, within_transform
from stagdid.panel import NEVER, PanelDataset

Z95 = 1.96

TWO_BY_TWO = "two_by_two"
STAGGERED_INDICATOR = "staggered_indicator"


def normal_inference(estimate, se, z=Z95):
    """``(ci_lo, ci_hi, p_value)`` from a normal reference distribution."""
    if not np.isfinite(se):
        return np.nan, np.nan, np.nan
    lo, hi = estimate - z * se, estimate + z * se
    if se == 0:
        p = 0.0 if estimate != 0 else 1.0
    else:
        p = float(2 * ndtr(-abs(estimate) / se))
    return lo, hi, p


@dataclass
class TwfeEstimate:
    estimate: float
    se: float
    ci: tuple
    p_value: float
    covariate_coefs: Dict[str, float]
    flavor: str
    n_units: int
    n_clusters: int
    metadata: Dict[str, object] = field(default_factory=dict)


def _fit_indicator(panel: PanelDataset, indicator, covariates):
    X = within_transform(panel, [("treat", indicator)] + list(covariates or []))
    y = demean_two_way(panel.outcome).reshape(-1)
    fit = ols_fit(X, y)
    if "treat" not in fit.names:
        raise DidError("ALL_COLUMNS_DROPPED", "treatment indicator is collinear with the fixed effects")
    V = cluster_robust_vcov(fit, X)
    j = fit.names.index("treat")
    delta, se = float(fit.coef[j]), float(np.sqrt(max(V[j, j], 0.0)))
    lo, hi, p = normal_inference(delta, se)
    gammas = {nm: float(c) for nm, c in zip(fit.names, fit.coef) if nm != "treat"}
    return delta, se, (lo, hi), p, gammas, fit


def two_by_two_did(panel: PanelDataset, covariates: Optional[Sequence[str]] = None) -> TwfeEstimate:
    """Interaction coefficient of a two-period, one-cohort TWFE regression.

    ``panel`` must hold exactly two periods and one treated cohort (use
    :func:`stagdid.panel.restrict` to carve one out). Covariates enter in
    both periods.
    """
    if panel.T != 2:
        raise DidError("MORE_THAN_TWO_PERIODS", f"panel has {panel.T} periods, need exactly 2")
    cohorts = set(np.unique(panel.cohort)) - {NEVER}
    if cohorts != {2}:
        raise DidError("MULTIPLE_COHORTS", f"need one cohort treated in period 2, got {sorted(cohorts)}")
    D = panel.treated.astype(float)
    delta, se, ci, p, gammas, fit = _fit_indicator(panel, D, covariates)
    return TwfeEstimate(delta, se, ci, p, gammas, TWO_BY_TWO, panel.n_units, panel.n_units,
                        {"dropped": fit.dropped})


def staggered_twfe(panel: PanelDataset, covariates: Optional[Sequence[str]] = None) -> TwfeEstimate:
    """Coefficient on the already-treated indicator in a staggered TWFE regression.

    Under effects that change with time since adoption this is a biased
    summary of the overall ATT; the result metadata says so.
    """
    if panel.T < 2:
        raise DidError("TOO_FEW_PERIODS", "need at least two periods")
    if not (panel.cohort != NEVER).any():
        raise DidError("NO_TREATED", "no treated cohort")
    D = panel.treated.astype(float)
    delta, se, ci, p, gammas, fit = _fit_indicator(panel, D, covariates)
    meta = {
        "dropped": fit.dropped,
        "warning": "biased under heterogeneous dynamic effects",
    }
    return TwfeEstimate(delta, se, ci, p, gammas, STAGGERED_INDICATOR, panel.n_units, panel.n_units, meta)


def percent_increase(att, observed_treated_mean):
    """Effect as a percentage of the estimated counterfactual mean ``mean - att``."""
    counterfactual = observed_treated_mean - att
    if not counterfactual > 0:
        raise DidError("NONPOSITIVE_COUNTERFACTUAL", f"counterfactual mean {counterfactual} is not positive")
    return 100.0 * att / counterfactual


class TwoWayFixedEffects(BaseEstimator):
    """TWFE difference-in-differences with unit-clustered CR1 errors.

    Parameters
    ----------
    covariates : list of str, optional
        Panel covariates entered contemporaneously.
    kind : {"auto", "two_by_two", "staggered_indicator"}, default="auto"
        ``auto`` picks the two-by-two model for a two-period single-cohort
        panel and the staggered indicator model otherwise.
    """

    def __init__(self, covariates=None, kind="auto"):
        self.covariates = covariates
        self.kind = kind

    def fit(self, panel, y=None):
        from stagdid.validation import check_panel

        panel = check_panel(panel, covariates=self.covariates)
        kind = self.kind
        if kind == "auto":
            single = len(set(np.unique(panel.cohort)) - {NEVER}) == 1
            kind = TWO_BY_TWO if panel.T == 2 and single else STAGGERED_INDICATOR
        if kind == TWO_BY_TWO:
            self.result_ = two_by_two_did(panel, self.covariates)
        elif kind == STAGGERED_INDICATOR:
            self.result_ = staggered_twfe(panel, self.covariates)
        else:
            raise DidError("BAD_PARAMETER", f"unknown kind {self.kind!r}")
        self.att_ = self.result_.estimate
        return self

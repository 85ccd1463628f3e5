"""Group-time ATT estimation: outcome regression, IPW and doubly robust.

Every estimator works on a :class:`~stagdid.panel.DeltaSlice` (cohort ``g``
plus the never treated, outcome change against the base period) and a
fitted :class:`NuisanceFit`. Expectations are replaced by sample means and
the IPW control weights are self-normalized (Hajek), so with no covariates
all three estimators reduce to the difference of mean outcome changes.

Each cell also carries its influence function, evaluated on the slice
units, including the estimation effect of both nuisance models.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from stagdid.errors import DidError
from stagdid.numkit import DesignMatrix, logit_fit, ols_fit
from stagdid.panel import CohortDesign, DeltaSlice, PanelDataset, delta_slice
from stagdid.twfe import normal_inference

OVERLAP_CUTOFF = 1 - 1e-6
DOWNGRADED = "SEPARATION_DOWNGRADED_TO_OR"


@dataclass(eq=False)
class GtattCell:
    """One ATT(g, t) estimate.

    ``influence`` holds per-unit influence values on the slice units listed
    in ``units`` (indices into the panel), scaled so that the estimation
    error is approximately their mean.
    """

    g: int
    t: int
    estimate: float
    se: float = np.nan
    ci: Tuple[float, float] = (np.nan, np.nan)
    p_value: float = np.nan
    flavor: str = "dr"
    n_treated: int = 0
    n_control: int = 0
    base: Optional[int] = None
    flags: Tuple[str, ...] = ()
    influence: Optional[np.ndarray] = field(default=None, repr=False)
    units: Optional[np.ndarray] = field(default=None, repr=False)
    nuisance: Optional["NuisanceFit"] = field(default=None, repr=False)
    ci_percentile: Tuple[float, float] = (np.nan, np.nan)

    @property
    def e(self):
        return self.t - self.g

    @property
    def is_post(self):
        return self.t >= self.g

    @property
    def ok(self):
        return bool(np.isfinite(self.estimate))

    def with_se(self, se):
        lo, hi, p = normal_inference(self.estimate, se)
        return replace(self, se=se, ci=(lo, hi), p_value=p)

    def full_influence(self, n_units):
        """Influence values over all ``n_units`` panel units (zero off-slice)."""
        out = np.zeros(n_units)
        if self.influence is None:
            return out * np.nan
        np.add.at(out, self.units, self.influence * n_units / len(self.units))
        return out


@dataclass(eq=False)
class NuisanceFit:
    """Fitted outcome-change regression and/or propensity model for one slice.

    ``design`` is the slice design ``[1, X_base]``; the coefficients apply to
    its ``*_kept`` columns.
    """

    design: np.ndarray
    names: Tuple[str, ...]
    treated: np.ndarray
    or_coef: Optional[np.ndarray] = None
    or_kept: Optional[np.ndarray] = None
    or_gram_inv: Optional[np.ndarray] = None
    ps_coef: Optional[np.ndarray] = None
    ps_kept: Optional[np.ndarray] = None
    ps_info_inv: Optional[np.ndarray] = None
    pscore: Optional[np.ndarray] = None
    flags: Tuple[str, ...] = ()

    def predict_change(self, design=None):
        Z = self.design if design is None else np.asarray(design, dtype=float)
        return Z[:, self.or_kept] @ self.or_coef

    def merge(self, other: "NuisanceFit"):
        out = replace(self)
        for name in ("or_coef", "or_kept", "or_gram_inv", "ps_coef", "ps_kept", "ps_info_inv", "pscore"):
            if getattr(other, name) is not None:
                setattr(out, name, getattr(other, name))
        out.flags = tuple(dict.fromkeys(self.flags + other.flags))
        return out


def _design(sl: DeltaSlice, covariates):
    if covariates is None:
        idx = list(range(sl.X.shape[1]))
    else:
        names = list(sl.covariate_names)
        try:
            idx = [names.index(c) for c in covariates]
        except ValueError as exc:
            raise DidError("UNKNOWN_COVARIATE", str(exc)) from None
    Z = np.column_stack([np.ones(len(sl.dy)), sl.X[:, idx]])
    names = ("(intercept)",) + tuple(sl.covariate_names[j] for j in idx)
    return Z, names


def fit_outcome_change(sl: DeltaSlice, covariates=None) -> NuisanceFit:
    """Least-squares regression of the outcome change on ``[1, X_base]`` over controls."""
    Z, names = _design(sl, covariates)
    ctrl = ~sl.treated
    if ctrl.sum() < Z.shape[1]:
        raise DidError("INSUFFICIENT_CONTROLS", f"{ctrl.sum()} controls for {Z.shape[1]} regressors")
    fit = ols_fit(DesignMatrix(Z[ctrl], names), sl.dy[ctrl])
    n = len(sl.dy)
    return NuisanceFit(Z, names, sl.treated, or_coef=fit.coef, or_kept=fit.kept, or_gram_inv=n * fit.bread)


def fit_pscore(sl: DeltaSlice, covariates=None) -> NuisanceFit:
    """Logistic regression of cohort-``g`` membership on ``[1, X_base]`` within the slice."""
    Z, names = _design(sl, covariates)
    if sl.n_treated == 0 or sl.n_control == 0:
        raise DidError("NO_VARIATION", "slice needs both treated and control units")
    fit = logit_fit(DesignMatrix(Z, names), sl.treated.astype(float))
    flags = ("PSCORE_RIDGE",) if fit.ridge_used else ()
    if not fit.converged:
        flags += ("PSCORE_NOT_CONVERGED",)
    n = len(sl.dy)
    return NuisanceFit(Z, names, sl.treated, ps_coef=fit.coef, ps_kept=fit.kept, ps_info_inv=n * fit.bread,
                       pscore=fit.fitted, flags=flags)


def fit_nuisance(sl: DeltaSlice, flavor, covariates=None) -> NuisanceFit:
    if flavor == "or":
        return fit_outcome_change(sl, covariates)
    if flavor == "ipw":
        return fit_pscore(sl, covariates)
    return fit_outcome_change(sl, covariates).merge(fit_pscore(sl, covariates))


def _cell(sl, nuisance, flavor, estimate, influence):
    se = float(np.sqrt(np.sum(influence**2)) / len(influence))
    lo, hi, p = normal_inference(estimate, se)
    return GtattCell(
        g=sl.g, t=sl.t, estimate=float(estimate), se=se, ci=(lo, hi), p_value=p, flavor=flavor,
        n_treated=sl.n_treated, n_control=sl.n_control, base=sl.base, flags=nuisance.flags,
        influence=influence, units=sl.units, nuisance=nuisance,
    )


def _odds_weights(sl, nuisance):
    p = nuisance.pscore
    ctrl = ~sl.treated
    if (p[ctrl] >= OVERLAP_CUTOFF).any():
        raise DidError("OVERLAP_VIOLATION", f"control propensity score reaches {p[ctrl].max():.8f}")
    return np.where(ctrl, p / (1 - p), 0.0)


def _ols_rep(sl, nuisance, resid):
    Z = nuisance.design[:, nuisance.or_kept]
    return ((~sl.treated) * resid)[:, None] * Z @ nuisance.or_gram_inv


def _ps_rep(sl, nuisance):
    Z = nuisance.design[:, nuisance.ps_kept]
    return (sl.treated - nuisance.pscore)[:, None] * Z @ nuisance.ps_info_inv


def att_or(sl: DeltaSlice, nuisance: NuisanceFit) -> GtattCell:
    """Mean over treated units of the outcome change net of the control-fitted prediction."""
    D = sl.treated.astype(float)
    if D.sum() == 0:
        raise DidError("EMPTY_CELL", f"cohort {sl.g} has no units")
    m = nuisance.predict_change()
    pD = D.mean()
    eta_t = np.mean(D * sl.dy) / pD
    eta_c = np.mean(D * m) / pD
    Z = nuisance.design[:, nuisance.or_kept]
    M1 = np.mean(D[:, None] * Z, axis=0)
    inf_treat = (D * sl.dy - D * eta_t) / pD
    inf_cont = (D * m - D * eta_c + _ols_rep(sl, nuisance, sl.dy - m) @ M1) / pD
    return _cell(sl, nuisance, "or", eta_t - eta_c, inf_treat - inf_cont)


def att_ipw(sl: DeltaSlice, nuisance: NuisanceFit) -> GtattCell:
    """Treated mean change minus the odds-weighted (Hajek) control mean change."""
    D = sl.treated.astype(float)
    if D.sum() == 0:
        raise DidError("EMPTY_CELL", f"cohort {sl.g} has no units")
    w = _odds_weights(sl, nuisance)
    pD, pW = D.mean(), w.mean()
    eta_t = np.mean(D * sl.dy) / pD
    eta_c = np.mean(w * sl.dy) / pW
    Z = nuisance.design[:, nuisance.ps_kept]
    M2 = np.mean((w * (sl.dy - eta_c))[:, None] * Z, axis=0)
    inf_treat = (D * sl.dy - D * eta_t) / pD
    inf_cont = (w * sl.dy - w * eta_c + _ps_rep(sl, nuisance) @ M2) / pW
    return _cell(sl, nuisance, "ipw", eta_t - eta_c, inf_treat - inf_cont)


def att_dr(sl: DeltaSlice, nuisance: NuisanceFit) -> GtattCell:
    """Doubly robust ATT: IPW contrast applied to outcome-regression residuals."""
    D = sl.treated.astype(float)
    if D.sum() == 0:
        raise DidError("EMPTY_CELL", f"cohort {sl.g} has no units")
    w = _odds_weights(sl, nuisance)
    m = nuisance.predict_change()
    r = sl.dy - m
    pD, pW = D.mean(), w.mean()
    eta_t = np.mean(D * r) / pD
    eta_c = np.mean(w * r) / pW
    Zo = nuisance.design[:, nuisance.or_kept]
    Zp = nuisance.design[:, nuisance.ps_kept]
    ols_rep = _ols_rep(sl, nuisance, r)
    M1 = np.mean(D[:, None] * Zo, axis=0)
    M2 = np.mean((w * (r - eta_c))[:, None] * Zp, axis=0)
    M3 = np.mean(w[:, None] * Zo, axis=0)
    inf_treat = (D * r - D * eta_t - ols_rep @ M1) / pD
    inf_cont = (w * r - w * eta_c + _ps_rep(sl, nuisance) @ M2 - ols_rep @ M3) / pW
    return _cell(sl, nuisance, "dr", eta_t - eta_c, inf_treat - inf_cont)


ESTIMATORS = {"or": att_or, "ipw": att_ipw, "dr": att_dr}


def estimate_cell(panel: PanelDataset, g, t, flavor="dr", covariates=None) -> GtattCell:
    """Estimate one cell, recording failures in the cell instead of raising.

    A propensity fit that hits separation falls back to the outcome
    regression estimator and flags the downgrade.
    """
    try:
        sl = delta_slice(panel, g, t)
    except DidError as err:
        return GtattCell(g=g, t=t, estimate=np.nan, flavor=flavor, flags=(err.code,))
    try:
        nuisance = fit_nuisance(sl, flavor, covariates)
        return ESTIMATORS[flavor](sl, nuisance)
    except DidError as err:
        if err.code == "SEPARATION_DETECTED" and flavor != "or":
            try:
                cell = att_or(sl, fit_outcome_change(sl, covariates))
                return replace(cell, flags=cell.flags + (DOWNGRADED,))
            except DidError as err2:
                err = err2
        return GtattCell(g=g, t=t, estimate=np.nan, flavor=flavor, n_treated=sl.n_treated,
                         n_control=sl.n_control, base=sl.base, flags=(err.code,))


def gtatt_table(panel: PanelDataset, design: CohortDesign, covariates: Optional[Sequence[str]] = None,
                flavor="dr", n_jobs=1, include_pre=True):
    """Estimate every (g, t) cell, post-treatment and placebo, ordered by (g, t)."""
    cells = design.cells(include_pre=include_pre)
    if covariates is None:
        covariates = []

    def run(gt):
        return estimate_cell(panel, gt[0], gt[1], flavor, covariates)

    if n_jobs and n_jobs != 1 and len(cells) > 1:
        workers = None if n_jobs < 0 else n_jobs
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, cells))
    return [run(gt) for gt in cells]


def overlap_report(cells, eps=0.01):
    """Per-cell overlap diagnostic on the control propensity scores.

    A cell is flagged when any control has a propensity score above
    ``1 - eps``.
    """
    rows = []
    for c in cells:
        nz = c.nuisance
        if nz is None or nz.pscore is None:
            rows.append({"g": c.g, "t": c.t, "max_control_pscore": np.nan, "share_above": np.nan,
                         "flagged": False})
            continue
        p = nz.pscore[~nz.treated]
        share = float(np.mean(p > 1 - eps))
        rows.append({"g": c.g, "t": c.t, "max_control_pscore": float(p.max()), "share_above": share,
                     "flagged": share > 0})
    return pd.DataFrame(rows, columns=["g", "t", "max_control_pscore", "share_above", "flagged"])

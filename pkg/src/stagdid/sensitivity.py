"""Parallel-trends sensitivity: linear-trend model comparison and robust intervals.

The robust intervals are a conservative closed-form variant: the worst-case
bias over each violation set is added to both ends of the usual normal
interval, instead of solving the optimization-based confidence sets. They
are weakly wider than the exact sets and are labelled as such in every
output.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from stagdid.errors import DidError
from stagdid.numkit import cluster_robust_vcov, cross_cluster_vcov, demean_two_way, ols_fit, within_transform
from stagdid.panel import NEVER, PanelDataset
from stagdid.twfe import Z95, normal_inference

CONSERVATIVE_LABEL = "conservative variant (closed-form outer bound, not the exact optimization-based set)"


@dataclass
class ParamEstimate:
    estimate: float
    se: float
    ci: tuple
    p_value: float

    @classmethod
    def from_se(cls, estimate, se):
        lo, hi, p = normal_inference(float(estimate), float(se))
        return cls(float(estimate), float(se), (lo, hi), p)


@dataclass
class TrendComparison:
    """ATT under parallel trends (``beta``) versus under a linear trend difference (``beta_prime``)."""

    beta: ParamEstimate
    beta_prime: ParamEstimate
    theta: ParamEstimate
    difference: ParamEstimate
    beta_k: Dict[int, float]
    beta_prime_k: Dict[int, float]
    treated_cohort: int
    n_pre_periods: int
    se_method: str = "analytic"


def _period_dummies(panel, g):
    G = (panel.cohort == g).astype(float)
    cols = []
    for k in range(g, panel.T + 1):
        d = np.zeros((panel.n_units, panel.T))
        d[:, k - 1] = G
        cols.append((f"beta_{k}", d))
    return G, cols


def _bh_fits(panel, g, covariates):
    G, dummies = _period_dummies(panel, g)
    trend = G[:, None] * np.arange(1, panel.T + 1)[None, :]
    covs = list(covariates or [])
    y = demean_two_way(panel.outcome).reshape(-1)
    X6 = within_transform(panel, dummies + covs)
    X7 = within_transform(panel, dummies + [("theta", trend)] + covs)
    f6, f7 = ols_fit(X6, y), ols_fit(X7, y)
    names = [nm for nm, _ in dummies]
    for f in (f6, f7):
        if any(nm not in f.names for nm in names):
            raise DidError("ALL_COLUMNS_DROPPED", "post-period effects are not identified")
    if "theta" not in f7.names:
        raise DidError("ALL_COLUMNS_DROPPED", "trend difference is not identified")
    return f6, X6, f7, X7, names


def _selector(fit, names):
    a = np.zeros(len(fit.names))
    for nm in names:
        a[fit.names.index(nm)] = 1.0 / len(names)
    return a


def bh_compare(panel: PanelDataset, covariates: Optional[Sequence[str]] = None, n_bootstrap=0,
               seed=None) -> TrendComparison:
    """Compare the average post-period effect with and without a linear trend difference.

    ``panel`` holds one treated cohort plus never-treated units. The trend
    term ``theta * G * t`` is identified from pre-periods only because each
    post period has its own treated-by-period effect. The covariance of
    ``beta - beta_prime`` comes from the stacked cluster-robust sandwich of
    both fits, or from a shared unit bootstrap when ``n_bootstrap > 0``.
    """
    cohorts = sorted(set(np.unique(panel.cohort)) - {NEVER})
    if len(cohorts) != 1:
        raise DidError("MULTIPLE_COHORTS", f"need exactly one treated cohort, got {cohorts}")
    g = int(cohorts[0])
    if g - 1 < 2:
        raise DidError("TOO_FEW_PRE_PERIODS", f"cohort {g} has {g - 1} pre-period(s), need at least 2")
    f6, X6, f7, X7, names = _bh_fits(panel, g, covariates)
    a6, a7 = _selector(f6, names), _selector(f7, names)
    j = f7.names.index("theta")
    b, bp, th = float(a6 @ f6.coef), float(a7 @ f7.coef), float(f7.coef[j])

    if n_bootstrap:
        from stagdid.inference import replicate_rng, stratified_indices
        from stagdid.validation import check_n_bootstrap, check_seed

        B, seed = check_n_bootstrap(n_bootstrap), check_seed(seed)
        draws = np.empty((B, 4))
        for r in range(B):
            sub = panel.take(stratified_indices(panel.cohort, replicate_rng(seed, r)))
            g6, _, g7, _, _ = _bh_fits(sub, g, covariates)
            d = (_selector(g6, names) @ g6.coef, _selector(g7, names) @ g7.coef, g7.coef[g7.names.index("theta")])
            draws[r] = (*d, d[0] - d[1])
        ses = draws.std(axis=0, ddof=1)
        method = "bootstrap"
    else:
        V6, V7 = cluster_robust_vcov(f6, X6), cluster_robust_vcov(f7, X7)
        C67 = cross_cluster_vcov(f6, X6, f7, X7)
        var_diff = a6 @ V6 @ a6 + a7 @ V7 @ a7 - 2 * a6 @ C67 @ a7
        ses = np.sqrt(np.clip([a6 @ V6 @ a6, a7 @ V7 @ a7, V7[j, j], var_diff], 0, None))
        method = "analytic"
    return TrendComparison(
        beta=ParamEstimate.from_se(b, ses[0]),
        beta_prime=ParamEstimate.from_se(bp, ses[1]),
        theta=ParamEstimate.from_se(th, ses[2]),
        difference=ParamEstimate.from_se(b - bp, ses[3]),
        beta_k={int(nm.split("_")[1]): float(f6.get(nm)) for nm in names},
        beta_prime_k={int(nm.split("_")[1]): float(f7.get(nm)) for nm in names},
        treated_cohort=g,
        n_pre_periods=g - 1,
        se_method=method,
    )


@dataclass
class RobustIntervalGrid:
    """Robust confidence intervals for one event-time effect over a grid of violation budgets."""

    kind: str
    event_time: int
    estimate: float
    se: float
    budgets: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    breakdown: float
    original_ci: tuple
    ci_at_breakdown: tuple
    inputs: Dict[str, float] = field(default_factory=dict)
    label: str = CONSERVATIVE_LABEL

    def interval(self, i):
        return float(self.lower[i]), float(self.upper[i])


def _check_grid(grid):
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if len(grid) == 0 or (grid < 0).any() or not np.isfinite(grid).all():
        raise DidError("BAD_PARAMETER", "budget grid must be finite and nonnegative")
    return grid


def rr_relative_magnitudes(estimate, se, pre_estimates, e, mbar_grid, z=Z95) -> RobustIntervalGrid:
    """Intervals allowing post-period violations up to ``Mbar`` times the largest pre-period one.

    ``pre_estimates`` are consecutive short-difference placebo effects, each
    one period's violation. The cumulative worst-case bias at event time
    ``e`` is ``Mbar * max|pre| * (e + 1)``.
    """
    pre = np.asarray(pre_estimates, dtype=float).reshape(-1)
    if len(pre) == 0:
        raise DidError("NO_PRE_PERIODS", "relative-magnitude bounds need at least one placebo estimate")
    if e < 0:
        raise DidError("BAD_PARAMETER", "event time must be nonnegative")
    grid = _check_grid(mbar_grid)
    delta_max = float(np.max(np.abs(pre)))
    scale = delta_max * (e + 1)
    bias = grid * scale
    lower = estimate - z * se - bias
    upper = estimate + z * se + bias
    if scale == 0:
        breakdown = 0.0 if abs(estimate) <= z * se else np.inf
    else:
        breakdown = max(0.0, (abs(estimate) - z * se) / scale)
    at = (estimate - z * se - breakdown * scale, estimate + z * se + breakdown * scale) if np.isfinite(breakdown) \
        else (np.nan, np.nan)
    return RobustIntervalGrid(
        "relative_magnitudes", e, float(estimate), float(se), grid, lower, upper, float(breakdown),
        (estimate - z * se, estimate + z * se), at, {"delta_max": delta_max},
    )


def rr_smoothness(estimate, se, slope, slope_se, e, m_grid, z=Z95) -> RobustIntervalGrid:
    """Intervals around linear extrapolation of the pre-trend with slope changes bounded by ``M``.

    The extrapolated bias at event time ``e`` is ``slope * (e + 1)``; the
    slack from slope changes adds ``M * (e + 1)(e + 2) / 2`` to each side.
    Slope uncertainty enters in quadrature as ``(e + 1) * slope_se``.
    """
    if e < 0:
        raise DidError("BAD_PARAMETER", "event time must be nonnegative")
    if not np.isfinite(slope):
        raise DidError("NO_PRE_PERIODS", "smoothness bounds need a pre-trend slope")
    grid = _check_grid(m_grid)
    h = (e + 1) * (e + 2) / 2.0
    se_total = float(np.hypot(se, (e + 1) * slope_se))
    center = estimate - slope * (e + 1)
    lower = center - z * se_total - grid * h
    upper = center + z * se_total + grid * h
    breakdown = max(0.0, (abs(center) - z * se_total) / h)
    at = (center - z * se_total - breakdown * h, center + z * se_total + breakdown * h)
    return RobustIntervalGrid(
        "smoothness", e, float(estimate), float(se), grid, lower, upper, float(breakdown),
        (estimate - z * se, estimate + z * se), at,
        {"slope": float(slope), "slope_se": float(slope_se), "se_total": se_total, "center": float(center)},
    )


def pre_trend_slope(pre_results):
    """Average per-period violation across placebo event-time summaries and its SE.

    Uses bootstrap draws when every input has them, analytic influence
    functions otherwise, and independent SEs as a last resort.
    """
    pre_results = list(pre_results)
    if not pre_results:
        raise DidError("NO_PRE_PERIODS", "no placebo estimates")
    est = float(np.mean([r.estimate for r in pre_results]))
    if len(pre_results) == 1:
        return est, float(pre_results[0].se)
    draws = [getattr(r, "draws", None) for r in pre_results]
    if all(d is not None for d in draws):
        from stagdid.inference import replicate_se

        return est, replicate_se(np.mean(np.vstack(draws), axis=0))
    infl = [getattr(r, "influence", None) for r in pre_results]
    if all(i is not None for i in infl):
        mean_if = np.mean(np.vstack(infl), axis=0)
        return est, float(np.sqrt(np.sum(mean_if**2)) / len(mean_if))
    ses = np.array([r.se for r in pre_results], dtype=float)
    return est, float(np.sqrt(np.sum(ses**2)) / len(ses))


def robust_intervals(aggregates, e, mbar_grid, m_grid, z=Z95):
    """Both robust grids for ``event:<e>`` using the placebo event-time summaries in ``aggregates``."""
    post = aggregates.get(f"event:{e}")
    if post is None:
        raise DidError("NO_ELIGIBLE_COHORT", f"no event-time estimate for e={e}")
    pre = [r for label, r in aggregates.items() if label.startswith("event:") and r.key < 0]
    if not pre:
        raise DidError("NO_PRE_PERIODS", "no placebo event-time estimates")
    rm = rr_relative_magnitudes(post.estimate, post.se, [r.estimate for r in pre], e, mbar_grid, z)
    slope, slope_se = pre_trend_slope(pre)
    sm = rr_smoothness(post.estimate, post.se, slope, slope_se, e, m_grid, z)
    return rm, sm

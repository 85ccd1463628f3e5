"""Aggregation of group-time effects into group, overall, event-time and simple summaries.

Cohort weights are ever-treated shares ``n_g / sum(n_g)``, renormalized over
whichever cohorts enter a summary. When the cells carry influence functions
and the design knows each unit's cohort, the summaries get analytic
standard errors that include the estimation effect of the cohort shares.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from stagdid.errors import DidError
from stagdid.panel import CohortDesign
from stagdid.twfe import normal_inference

OVERALL, GROUP, EVENT, SIMPLE = "overall", "group", "event", "simple"


@dataclass(eq=False)
class AggregationResult:
    kind: str
    key: Optional[int]
    estimate: float
    weights: Dict
    se: float = np.nan
    ci: Tuple[float, float] = (np.nan, np.nan)
    p_value: float = np.nan
    ci_percentile: Tuple[float, float] = (np.nan, np.nan)
    se_method: Optional[str] = None
    draws: Optional[np.ndarray] = field(default=None, repr=False)
    influence: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def label(self):
        return self.kind if self.key is None else f"{self.kind}:{self.key}"

    def with_se(self, se, method):
        lo, hi, p = normal_inference(self.estimate, se)
        return replace(self, se=se, ci=(lo, hi), p_value=p, se_method=method)


def _attach_influence(result, n_units):
    if result.influence is None or not np.all(np.isfinite(result.influence)):
        return result
    se = float(np.sqrt(np.sum(result.influence**2)) / n_units)
    return replace(result, influence=result.influence).with_se(se, "analytic")


def _combine(values, cohorts, influences, design):
    """Cohort-size weighted mean of ``values`` and its influence function.

    ``cohorts[c]`` is the cohort behind entry ``c``; an entry's weight is
    ``n_g`` normalized over the entries, so a cohort appearing twice counts
    twice.
    """
    n_g = np.array([design.n_g[g] for g in cohorts], dtype=float)
    w = n_g / n_g.sum()
    est = float(np.dot(w, values))
    infl = None
    uc = design.unit_cohorts
    if uc is not None and influences is not None and all(i is not None for i in influences):
        n = len(uc)
        Q = n_g.sum() / n
        k = np.zeros(n)
        for g in cohorts:
            k += uc == g
        infl = sum(wc * ic for wc, ic in zip(w, influences))
        for v, g, wc in zip(values, cohorts, w):
            infl = infl + v * ((uc == g) - wc * k) / Q
    return est, w, infl


def _cell_influence(cell, design):
    if design is None or design.unit_cohorts is None or cell.influence is None:
        return None
    return cell.full_influence(len(design.unit_cohorts))


def _finish(result, design):
    if design is not None and design.unit_cohorts is not None:
        return _attach_influence(result, len(design.unit_cohorts))
    return result


def agg_group(cells, g, design: Optional[CohortDesign] = None) -> AggregationResult:
    """Unweighted mean of ATT(g, t) over post-treatment periods ``t = g..T``."""
    post = sorted((c for c in cells if c.g == g and c.t >= g), key=lambda c: c.t)
    if design is not None and len(post) != design.T - g + 1:
        raise DidError("MISSING_CELL", f"cohort {g} has {len(post)} of {design.T - g + 1} post cells")
    if not post or not all(c.ok for c in post):
        raise DidError("MISSING_CELL", f"cohort {g} has missing or failed post cells")
    est = float(np.mean([c.estimate for c in post]))
    w = 1.0 / len(post)
    infl = [_cell_influence(c, design) for c in post]
    infl = None if any(i is None for i in infl) else w * sum(infl)
    res = AggregationResult(GROUP, g, est, {(c.g, c.t): w for c in post}, influence=infl)
    return _finish(res, design)


def agg_overall(groups, design: CohortDesign) -> AggregationResult:
    """Cohort-share weighted mean of the per-cohort averages."""
    if isinstance(groups, dict):
        groups = list(groups.values())
    by_g = {r.key: r for r in groups}
    missing = [g for g in design.cohorts if g not in by_g]
    if missing:
        raise DidError("MISSING_CELL", f"no group aggregate for cohorts {missing}")
    cohorts = list(design.cohorts)
    vals = [by_g[g].estimate for g in cohorts]
    infl = [by_g[g].influence for g in cohorts]
    est, w, inf = _combine(vals, cohorts, infl, design)
    res = AggregationResult(OVERALL, None, est, dict(zip(cohorts, w.tolist())), influence=inf)
    return _finish(res, design)


def agg_event(cells, e, design: CohortDesign) -> AggregationResult:
    """Cohort-size weighted mean of ATT(g, g+e) over cohorts observed at event time ``e``."""
    chosen = sorted((c for c in cells if c.e == e and c.t <= design.T and c.ok), key=lambda c: c.g)
    if not chosen:
        raise DidError("NO_ELIGIBLE_COHORT", f"no cohort has an estimated cell at event time {e}")
    cohorts = [c.g for c in chosen]
    infl = [_cell_influence(c, design) for c in chosen]
    est, w, inf = _combine([c.estimate for c in chosen], cohorts, infl, design)
    res = AggregationResult(EVENT, e, est, {(c.g, c.t): wc for c, wc in zip(chosen, w.tolist())}, influence=inf)
    return _finish(res, design)


def agg_simple(cells, design: CohortDesign) -> AggregationResult:
    """Mean of every post-treatment cell weighted by its cohort size."""
    post = sorted((c for c in cells if c.is_post), key=lambda c: (c.g, c.t))
    if not post:
        raise DidError("MISSING_CELL", "no post-treatment cells")
    if not all(c.ok for c in post):
        raise DidError("MISSING_CELL", "some post-treatment cells failed")
    infl = [_cell_influence(c, design) for c in post]
    est, w, inf = _combine([c.estimate for c in post], [c.g for c in post], infl, design)
    res = AggregationResult(SIMPLE, None, est, {(c.g, c.t): wc for c, wc in zip(post, w.tolist())}, influence=inf)
    return _finish(res, design)


def aggregate_all(cells, design: CohortDesign, event_times=None):
    """Every summary that can be formed from ``cells``, keyed by label.

    Labels are ``"group:<g>"``, ``"overall"``, ``"simple"`` and
    ``"event:<e>"`` (negative ``e`` for placebo event times). Summaries whose
    inputs failed are left out.
    """
    out = {}
    groups = {}
    for g in design.cohorts:
        try:
            groups[g] = out[f"group:{g}"] = agg_group(cells, g, design)
        except DidError:
            pass
    if len(groups) == len(design.cohorts):
        out["overall"] = agg_overall(groups, design)
    try:
        out["simple"] = agg_simple(cells, design)
    except DidError:
        pass
    if event_times is None:
        event_times = sorted({c.e for c in cells})
    for e in event_times:
        try:
            out[f"event:{e}"] = agg_event(cells, e, design)
        except DidError:
            pass
    return out

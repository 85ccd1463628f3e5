"""Stratified unit bootstrap for cells and their summaries.

Units are resampled with replacement within their cohort (never treated
being one stratum), so every replicate keeps every cohort and the cohort
sizes fixed. Replicate ``r`` draws from a generator seeded by
``SeedSequence(seed, spawn_key=(r,))``; results therefore do not depend on
how replicates are split across workers.
"""

from dataclasses import dataclass, field, replace
from typing import Dict

import numpy as np
from joblib import Parallel, delayed

from stagdid.aggregate import aggregate_all
from stagdid.csdid import gtatt_table
from stagdid.errors import DidError
from stagdid.panel import NEVER, CohortDesign, PanelDataset, build_cohort_design
from stagdid.validation import check_n_bootstrap, check_seed

Z95 = 1.96


def replicate_rng(seed, r):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(r,))))


def stratified_indices(strata, rng):
    """Resample positions with replacement within each stratum (strata in sorted order)."""
    strata = np.asarray(strata)
    out = np.empty(len(strata), dtype=np.int64)
    pos = 0
    for s in np.unique(strata):
        members = np.flatnonzero(strata == s)
        k = len(members)
        out[pos:pos + k] = members[rng.integers(0, k, size=k)]
        pos += k
    return out


@dataclass(eq=False)
class BootstrapResult:
    """Replicate draws keyed by label: ``"cell:<g>,<t>"`` and the aggregate labels."""

    B: int
    seed: int
    draws: Dict[str, np.ndarray] = field(repr=False)

    def se(self, label):
        return replicate_se(self.draws[label])

    def percentile_ci(self, label, level=0.95):
        d = self.draws[label]
        d = d[np.isfinite(d)]
        if len(d) == 0:
            return (np.nan, np.nan)
        a = (1 - level) / 2
        return tuple(float(q) for q in np.quantile(d, [a, 1 - a]))


def replicate_se(draws):
    d = np.asarray(draws, dtype=float)
    d = d[np.isfinite(d)]
    if len(d) < 2:
        return np.nan
    if np.ptp(d) == 0:
        return 0.0
    return float(np.std(d, ddof=1))


def cell_label(g, t):
    return f"cell:{g},{t}"


def _one_replicate(panel, covariates, flavor, event_times, seed, r):
    rng = replicate_rng(seed, r)
    idx = stratified_indices(panel.cohort, rng)
    boot = panel.take(idx)
    design = build_cohort_design(boot)
    if design.n_g != dict(zip(*np.unique(panel.cohort[panel.cohort != NEVER], return_counts=True))):
        raise DidError("REPLICATE_DEGENERATE", f"replicate {r} lost a cohort")
    design = replace(design, unit_cohorts=None)
    cells = gtatt_table(boot, design, covariates, flavor)
    out = {cell_label(c.g, c.t): c.estimate for c in cells}
    for label, res in aggregate_all(cells, design, event_times).items():
        out[label] = res.estimate
    return out


def _batch(panel, covariates, flavor, event_times, seed, rs):
    return [_one_replicate(panel, covariates, flavor, event_times, seed, r) for r in rs]


def bootstrap_inference(panel: PanelDataset, design: CohortDesign, covariates=None, flavor="dr", B=999,
                        seed=None, n_jobs=1, event_times=None) -> BootstrapResult:
    """Re-estimate every cell and summary on ``B`` stratified unit resamples."""
    B = check_n_bootstrap(B)
    if B == 0:
        raise DidError("BAD_PARAMETER", "B must be positive")
    seed = check_seed(seed)
    if event_times is None:
        event_times = sorted({t - g for g, t in design.cells()})
    covariates = list(covariates or [])
    reps = np.arange(B)
    if n_jobs == 1:
        rows = _batch(panel, covariates, flavor, event_times, seed, reps)
    else:
        n_batches = max(1, min(B, 4 * (n_jobs if n_jobs > 0 else 8)))
        chunks = np.array_split(reps, n_batches)
        parts = Parallel(n_jobs=n_jobs)(
            delayed(_batch)(panel, covariates, flavor, event_times, seed, ch) for ch in chunks
        )
        rows = [row for part in parts for row in part]
    labels = sorted({k for row in rows for k in row})
    draws = {k: np.array([row.get(k, np.nan) for row in rows]) for k in labels}
    return BootstrapResult(B, seed, draws)


def apply_bootstrap(cells, aggregates, boot: BootstrapResult):
    """Copies of cells and summaries whose SE, CIs and p-values come from ``boot``."""
    new_cells = []
    for c in cells:
        label = cell_label(c.g, c.t)
        if label in boot.draws and c.ok:
            c = replace(c.with_se(boot.se(label)), ci_percentile=boot.percentile_ci(label))
        new_cells.append(c)
    new_aggs = {}
    for label, res in aggregates.items():
        if label in boot.draws:
            res = res.with_se(boot.se(label), "bootstrap")
            res = replace(res, ci_percentile=boot.percentile_ci(label), draws=boot.draws[label])
        new_aggs[label] = res
    return new_cells, new_aggs

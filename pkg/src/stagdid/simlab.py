"""Synthetic staggered-adoption panels with known group-time effects.

Untreated outcomes follow

    Y_it(0) = a_i + f_t + (gamma + lambda * (t - 1))' X_i + e_it

so ``lambda`` makes covariates shift trends: parallel trends then hold only
conditionally on ``X``, and cohort membership depends on ``X`` through a
multinomial logit, so unadjusted comparisons are confounded. Observed
outcomes add ``tau(g, t)`` from period ``g`` on, plus an optional linear
trend ``violation * t`` for ever-treated units.

Every draw comes from a PCG64 generator seeded by ``SeedSequence(seed)``;
replication ``r`` of a study uses ``SeedSequence(seed, spawn_key=(r,))``.
"""

import json
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np

from stagdid.aggregate import agg_simple
from stagdid.errors import DidError
from stagdid.panel import NEVER, PanelDataset, build_cohort_design
from stagdid.twfe import staggered_twfe

MAX_ASSIGNMENT_TRIES = 20

# Group-time effects of the reference application, used as injected truth.
REFERENCE_TAU = {(2, 2): 2.3, (2, 3): 3.1, (2, 4): 3.2, (3, 3): 0.9, (3, 4): 1.5}
REFERENCE_COHORTS = {2: 41, 3: 135}
REFERENCE_NEVER = 6221


@dataclass
class ScenarioSpec:
    """Parameters of a synthetic panel.

    ``n_per_cohort`` maps first-treated period to the (expected) cohort size.
    ``tau`` is a mapping ``{(g, t): effect}`` or a callable ``tau(g, t)``;
    missing post cells default to 0. With ``assignment="fixed"`` cohort sizes
    are exact (covariate-weighted sampling without replacement); with
    ``"logistic"`` they are random with the given expectations.
    """

    n_per_cohort: Dict[int, int]
    n_never: int
    T: int
    seed: int
    tau: Union[Dict, Callable, None] = None
    n_covariates: int = 1
    covariate_mean: float = 0.0
    covariate_sd: float = 1.0
    gamma: Sequence[float] = (1.0,)
    trend_coef: Sequence[float] = (0.5,)
    selection_coef: Sequence[float] = (0.5,)
    unit_sd: float = 1.0
    period_effects: Optional[Sequence[float]] = None
    noise_sd: float = 1.0
    violation: float = 0.0
    assignment: str = "logistic"

    def __post_init__(self):
        self.n_per_cohort = {int(g): int(n) for g, n in self.n_per_cohort.items()}
        if self.seed is None:
            raise DidError("CONFIG_MISSING_SEED", "a scenario needs a seed")
        for g in self.n_per_cohort:
            if not 2 <= g <= self.T:
                raise DidError("COHORT_OUT_OF_RANGE", f"cohort {g} outside 2..{self.T}")
        if self.n_never < 1:
            raise DidError("NO_NEVER_TREATED", "scenario needs never-treated units")
        k = self.n_covariates
        for name in ("gamma", "trend_coef", "selection_coef"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (k,))
            setattr(self, name, tuple(float(x) for x in v))
        if self.period_effects is not None and len(self.period_effects) != self.T:
            raise DidError("BAD_SCENARIO", "period_effects needs one value per period")
        if self.assignment not in ("logistic", "fixed"):
            raise DidError("BAD_SCENARIO", f"unknown assignment {self.assignment!r}")

    def effect(self, g, t):
        if self.tau is None:
            return 0.0
        if callable(self.tau):
            return float(self.tau(g, t))
        return float(self.tau.get((g, t), 0.0))

    def truth(self):
        return {(g, t): self.effect(g, t) for g in sorted(self.n_per_cohort) for t in range(g, self.T + 1)}

    def to_dict(self):
        d = asdict(self)
        if callable(self.tau):
            d["tau"] = {f"{g},{t}": v for (g, t), v in self.truth().items()}
        elif self.tau is not None:
            d["tau"] = {f"{g},{t}": v for (g, t), v in self.tau.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("tau"), dict):
            d["tau"] = {tuple(int(x) for x in str(k).split(",")): float(v) for k, v in d["tau"].items()}
        if "n_per_cohort" in d:
            d["n_per_cohort"] = {int(k): int(v) for k, v in d["n_per_cohort"].items()}
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def reference_scenario(seed, noise_sd=1.0, **overrides):
    """Cohorts of 41 and 135 adopters, 6,221 never treated, four periods, reference effects."""
    kw = dict(n_per_cohort=dict(REFERENCE_COHORTS), n_never=REFERENCE_NEVER, T=4, seed=seed, tau=dict(REFERENCE_TAU),
              noise_sd=noise_sd, assignment="fixed", period_effects=(40.0, 41.0, 39.5, 42.0))
    kw.update(overrides)
    return ScenarioSpec(**kw)


def _rng(seed, r=None):
    ss = np.random.SeedSequence(seed) if r is None else np.random.SeedSequence(seed, spawn_key=(r,))
    return np.random.Generator(np.random.PCG64(ss))


def _assign(spec, X, rng):
    cohorts = sorted(spec.n_per_cohort)
    n = X.shape[0]
    score = X @ np.asarray(spec.selection_coef)
    if spec.assignment == "fixed":
        # Gumbel top-k: sampling without replacement with weights exp(score)
        out = np.full(n, NEVER, dtype=np.int64)
        free = np.ones(n, dtype=bool)
        for g in cohorts:
            key = np.where(free, score + rng.gumbel(size=n), -np.inf)
            pick = np.argsort(-key, kind="stable")[: spec.n_per_cohort[g]]
            out[pick] = g
            free[pick] = False
        return out
    total = sum(spec.n_per_cohort.values()) + spec.n_never
    target = np.array([spec.n_per_cohort[g] / total for g in cohorts])
    intercept = np.log(target / (spec.n_never / total))
    for _ in range(50):
        expo = np.exp(intercept[None, :] + score[:, None])
        probs = expo / (1 + expo.sum(axis=1, keepdims=True))
        intercept += np.log(target / probs.mean(axis=0))
    expo = np.exp(intercept[None, :] + score[:, None])
    probs = np.column_stack([1.0 / (1 + expo.sum(axis=1)), expo / (1 + expo.sum(axis=1, keepdims=True))])
    for _ in range(MAX_ASSIGNMENT_TRIES):
        u = rng.random(n)
        choice = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
        choice = np.minimum(choice, len(cohorts))
        labels = np.array([NEVER] + cohorts)[choice]
        if all((labels == g).any() for g in cohorts) and (labels == NEVER).any():
            return labels
    raise DidError("EMPTY_COHORT", f"a cohort stayed empty after {MAX_ASSIGNMENT_TRIES} assignment draws")


def gen_panel(spec: ScenarioSpec, replication=None):
    """Draw a panel and its truth table ``{(g, t): tau}`` for post cells."""
    rng = _rng(spec.seed, replication)
    n = sum(spec.n_per_cohort.values()) + spec.n_never
    k, T = spec.n_covariates, spec.T
    X = spec.covariate_mean + spec.covariate_sd * rng.standard_normal((n, k))
    cohort = _assign(spec, X, rng)
    alpha = spec.unit_sd * rng.standard_normal(n)
    eps = spec.noise_sd * rng.standard_normal((n, T))
    f = np.zeros(T) if spec.period_effects is None else np.asarray(spec.period_effects, dtype=float)
    t = np.arange(1, T + 1)
    coef_t = np.asarray(spec.gamma)[None, :] + np.asarray(spec.trend_coef)[None, :] * (t - 1)[:, None]
    Y = alpha[:, None] + f[None, :] + X @ coef_t.T + eps
    for g in spec.n_per_cohort:
        rows = cohort == g
        for tt in range(g, T + 1):
            Y[rows, tt - 1] += spec.effect(g, tt)
    if spec.violation:
        Y[cohort != NEVER] += spec.violation * t[None, :]
    names = tuple(f"x{j + 1}" for j in range(k))
    panel = PanelDataset(
        units=np.arange(n),
        period_labels=tuple(range(1, T + 1)),
        outcome=Y,
        covariates=np.repeat(X[:, None, :], T, axis=1),
        covariate_names=names,
        cohort=cohort,
    )
    return panel, spec.truth()


def write_panel_csv(panel: PanelDataset, path):
    """Write ``panel`` in the ingestion CSV format with round-trip float text."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "period", "outcome", "cohort", *panel.covariate_names])
        labels = panel.period_labels
        for i in range(panel.n_units):
            g = panel.cohort[i]
            glab = "never" if g == NEVER else labels[g - 1]
            for c in range(panel.T):
                w.writerow([panel.units[i], labels[c], repr(float(panel.outcome[i, c])), glab,
                            *(repr(float(v)) for v in panel.covariates[i, c])])


def oracle_gtatt(panel: PanelDataset, g, t):
    """Difference of mean outcome changes, cohort ``g`` minus never treated, by explicit loops.

    Post cells difference against ``g - 1``, placebo cells against ``t - 1``.
    """
    base = g - 1 if t >= g else t - 1
    treated_sum = control_sum = 0.0
    n_t = n_c = 0
    for i in range(panel.n_units):
        change = float(panel.outcome[i][t - 1]) - float(panel.outcome[i][base - 1])
        if panel.cohort[i] == g:
            treated_sum += change
            n_t += 1
        elif panel.cohort[i] == NEVER:
            control_sum += change
            n_c += 1
    if n_t == 0 or n_c == 0:
        raise DidError("EMPTY_CELL", f"cell ({g}, {t}) has no treated or no control units")
    return treated_sum / n_t - control_sum / n_c


def true_cell_weighted_att(spec: ScenarioSpec, panel: PanelDataset):
    """Average effect over all treated unit-periods of ``panel``."""
    total, count = 0.0, 0
    for g in spec.n_per_cohort:
        n_g = int(np.sum(panel.cohort == g))
        for t in range(g, spec.T + 1):
            total += n_g * spec.effect(g, t)
            count += n_g
    return total / count


def twfe_bias_demo(spec: ScenarioSpec, replication=None, covariates=None):
    """Staggered TWFE against the group-time pipeline on one panel drawn from ``spec``."""
    from stagdid.aggregate import agg_group, agg_overall
    from stagdid.csdid import gtatt_table

    if len(spec.n_per_cohort) < 2:
        raise DidError("BAD_SCENARIO", "the demonstration needs at least two cohorts")
    panel, _ = gen_panel(spec, replication)
    design = build_cohort_design(panel)
    cells = gtatt_table(panel, design, covariates, "dr", include_pre=False)
    simple = agg_simple(cells, design).estimate
    overall = agg_overall({g: agg_group(cells, g, design) for g in design.cohorts}, design).estimate
    twfe = staggered_twfe(panel, covariates).estimate
    truth = true_cell_weighted_att(spec, panel)
    return {
        "truth": truth,
        "twfe": twfe,
        "cs_simple": simple,
        "cs_overall": overall,
        "twfe_bias": twfe - truth,
        "cs_bias": simple - truth,
    }


def twfe_bias_study(spec: ScenarioSpec, n_reps, covariates=None):
    """Repeat :func:`twfe_bias_demo` over replications; returns per-replication biases."""
    rows = [twfe_bias_demo(spec, r, covariates) for r in range(n_reps)]
    twfe = np.array([r["twfe_bias"] for r in rows])
    cs = np.array([r["cs_bias"] for r in rows])
    return {"twfe_bias": twfe, "cs_bias": cs,
            "twfe_mean": twfe.mean(), "twfe_mcse": twfe.std(ddof=1) / np.sqrt(n_reps),
            "cs_mean": cs.mean(), "cs_mcse": cs.std(ddof=1) / np.sqrt(n_reps)}


def dr_slice_scenario(n, misspecify, seed, replication=None, effect=1.0):
    """Two-period panel for double-robustness checks with one observed covariate ``x1``.

    ``misspecify="outcome"``: selection is logistic-linear in ``x`` but the
    outcome change is ``exp(x)``, so a linear outcome model is wrong.
    ``misspecify="pscore"``: the outcome change is linear in ``x`` but
    selection is logistic in ``(x, x^2)``, so a linear-index propensity model
    is wrong. True effect is ``effect``.
    """
    rng = _rng(seed, replication)
    x = rng.standard_normal(n)
    if misspecify == "outcome":
        idx = -1.0 + 0.8 * x
        trend = 2.0 * np.exp(x)
    elif misspecify == "pscore":
        idx = -1.5 + 0.5 * x + 0.8 * x**2
        trend = 2.0 * x
    else:
        raise DidError("BAD_SCENARIO", f"misspecify must be 'outcome' or 'pscore', got {misspecify!r}")
    D = rng.random(n) < 1.0 / (1.0 + np.exp(-idx))
    if D.all() or not D.any():
        raise DidError("EMPTY_COHORT", "degenerate assignment")
    y1 = x + rng.standard_normal(n)
    y2 = y1 + 1.0 + trend + effect * D + rng.standard_normal(n)
    cohort = np.where(D, 2, NEVER)
    panel = PanelDataset(
        units=np.arange(n),
        period_labels=(1, 2),
        outcome=np.column_stack([y1, y2]),
        covariates=np.repeat(x[:, None, None], 2, axis=1),
        covariate_names=("x1",),
        cohort=cohort,
    )
    return panel

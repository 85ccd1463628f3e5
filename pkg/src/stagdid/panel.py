"""Panel data model, cohort design and base-period differencing.

A validated panel is stored in wide form: ``outcome`` is ``(n_units, T)``
and ``covariates`` is ``(n_units, T, k)``. Periods are always the integers
``1..T``; the original labels are kept in ``period_labels``. Cohorts are the
first treated period in the same ``1..T`` scale, with ``NEVER`` (0) marking
never-treated units.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from stagdid.errors import DidError

NEVER = 0
NEVER_TOKENS = ("never", "inf")


class BaseRule(str, Enum):
    """Base period chosen for a (g, t) cell."""

    POST_BASE_G_MINUS_1 = "post_base_g_minus_1"
    PRE_BASE_T_MINUS_1 = "pre_base_t_minus_1"


def _frozen(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced unit-by-period panel. Build it with :func:`validate_panel`."""

    units: np.ndarray
    period_labels: Tuple
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_names: Tuple[str, ...]
    cohort: np.ndarray

    def __post_init__(self):
        for name in ("units", "outcome", "covariates", "cohort"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def n_units(self):
        return self.outcome.shape[0]

    @property
    def T(self):
        return self.outcome.shape[1]

    @property
    def period_map(self) -> Dict:
        """Original period label -> internal period index (1..T)."""
        return {lab: k + 1 for k, lab in enumerate(self.period_labels)}

    @property
    def treated(self):
        """Boolean ``(n_units, T)`` treatment status, ``t >= g`` for treated units."""
        t = np.arange(1, self.T + 1)
        return (self.cohort[:, None] != NEVER) & (t[None, :] >= self.cohort[:, None])

    def covariate(self, name):
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise DidError("UNKNOWN_COVARIATE", f"no covariate named {name!r}") from None
        return self.covariates[:, :, j]

    def take(self, index):
        """Panel made of the units at ``index`` (repeats allowed).

        Units are relabelled ``0..len(index)-1`` so resampled copies stay
        distinct. No re-validation is done: a subset of a valid panel only
        needs the never-treated check, which callers own.
        """
        index = np.asarray(index)
        return PanelDataset(
            units=np.arange(len(index)),
            period_labels=self.period_labels,
            outcome=self.outcome[index],
            covariates=self.covariates[index],
            covariate_names=self.covariate_names,
            cohort=self.cohort[index],
        )

    def to_frame(self, original_labels=False):
        """Long-format frame with columns unit, period, outcome, cohort, covariates.

        With ``original_labels=True`` periods and cohorts use the labels the
        panel was built from; otherwise the internal ``1..T`` indices.
        """
        n, T = self.outcome.shape
        labels = np.asarray(self.period_labels, dtype=object) if original_labels else np.arange(1, T + 1)
        cohort = np.empty(n, dtype=object)
        for i, g in enumerate(self.cohort):
            cohort[i] = "never" if g == NEVER else labels[g - 1]
        frame = pd.DataFrame(
            {
                "unit": np.repeat(self.units, T),
                "period": np.tile(labels, n),
                "outcome": self.outcome.reshape(-1),
                "cohort": np.repeat(cohort, T),
            }
        )
        for j, name in enumerate(self.covariate_names):
            frame[name] = self.covariates[:, :, j].reshape(-1)
        return frame


def _is_never(value):
    if value is None:
        return False
    if isinstance(value, str):
        return value.strip().lower() in NEVER_TOKENS
    try:
        return bool(np.isinf(value)) and value > 0
    except TypeError:
        return False


def _as_frame(data, unit, period, outcome, cohort, covariates):
    if isinstance(data, PanelDataset):
        return data.to_frame(original_labels=True), list(data.covariate_names)
    if isinstance(data, pd.DataFrame):
        return data, list(covariates or [])
    rows = list(data)
    if not rows:
        raise DidError("EMPTY_PANEL", "no rows supplied")
    covariates = list(covariates or [])
    records = []
    for row in rows:
        u, p, y, g = row[:4]
        x = row[4] if len(row) > 4 else ()
        if isinstance(x, dict):
            if not covariates:
                covariates = list(x)
            x = [x[c] for c in covariates]
        rec = {unit: u, period: p, outcome: y, cohort: g}
        if len(x) != len(covariates):
            raise DidError("BAD_COVARIATES", f"row {row!r} has {len(x)} covariates, expected {len(covariates)}")
        rec.update(zip(covariates, x))
        records.append(rec)
    return pd.DataFrame.from_records(records), covariates


def validate_panel(
    data,
    unit="unit",
    period="period",
    outcome="outcome",
    cohort="cohort",
    covariates: Optional[Sequence[str]] = None,
) -> PanelDataset:
    """Check raw long-format rows and build a :class:`PanelDataset`.

    ``data`` may be a DataFrame, an iterable of
    ``(unit, period, outcome, cohort[, covariates])`` tuples, or an existing
    panel (re-validation is the identity). Cohort values are period labels
    or a never-treated token (``"never"``, ``"inf"`` or ``+inf``). Blank,
    ``None`` and NaN cohorts are missing values, not never treated.

    Raises
    ------
    DidError
        With code ``EMPTY_PANEL``, ``MISSING_VALUE``, ``BAD_PERIOD``,
        ``DUPLICATE_ROW``, ``UNBALANCED``, ``NONABSORBING``,
        ``COHORT_OUT_OF_RANGE``, ``COHORT_AT_FIRST_PERIOD`` or
        ``NO_NEVER_TREATED``.
    """
    frame, covariates = _as_frame(data, unit, period, outcome, cohort, covariates)
    if len(frame) == 0:
        raise DidError("EMPTY_PANEL", "no rows supplied")
    needed = [unit, period, outcome, cohort] + covariates
    missing_cols = [c for c in needed if c not in frame.columns]
    if missing_cols:
        raise DidError("UNKNOWN_COLUMN", f"missing columns {missing_cols}")
    frame = frame[needed]

    numeric_cols = [outcome] + covariates
    values = frame[numeric_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    if frame[[unit, period]].isna().any().any() or not np.isfinite(values).all():
        raise DidError("MISSING_VALUE", "missing or non-numeric unit, period, outcome or covariate values")

    periods = pd.to_numeric(frame[period], errors="coerce").to_numpy()
    if np.isnan(periods.astype(float)).any():
        raise DidError("BAD_PERIOD", "period labels must be numeric")
    labels = np.unique(periods)
    T = len(labels)
    t_idx = np.searchsorted(labels, periods) + 1

    unit_codes, unit_labels = pd.factorize(frame[unit], sort=True)
    n = len(unit_labels)
    key = unit_codes.astype(np.int64) * T + (t_idx - 1)
    if len(np.unique(key)) != len(key):
        raise DidError("DUPLICATE_ROW", "more than one row for some (unit, period)")
    if len(key) != n * T:
        counts = np.bincount(unit_codes, minlength=n)
        bad = unit_labels[np.flatnonzero(counts != T)[0]]
        raise DidError("UNBALANCED", f"unit {bad!r} is not observed in all {T} periods")

    g_raw = frame[cohort].to_numpy(dtype=object)
    g_idx = np.empty(len(g_raw), dtype=np.int64)
    label_pos = {float(lab): k + 1 for k, lab in enumerate(labels)}
    for r, val in enumerate(g_raw):
        if _is_never(val):
            g_idx[r] = NEVER
            continue
        try:
            num = float(val)
        except (TypeError, ValueError):
            raise DidError("MISSING_VALUE", f"cohort value {val!r} is neither a period nor 'never'") from None
        if np.isnan(num):
            raise DidError("MISSING_VALUE", "missing cohort value")
        if num not in label_pos:
            raise DidError("COHORT_OUT_OF_RANGE", f"cohort {val!r} is not one of the observed periods")
        g_idx[r] = label_pos[num]

    order = np.argsort(key, kind="stable")
    g_wide = g_idx[order].reshape(n, T)
    if (g_wide != g_wide[:, :1]).any():
        bad = unit_labels[np.flatnonzero((g_wide != g_wide[:, :1]).any(axis=1))[0]]
        raise DidError("NONABSORBING", f"cohort varies within unit {bad!r}")
    unit_cohort = g_wide[:, 0]
    if (unit_cohort == 1).any():
        raise DidError("COHORT_AT_FIRST_PERIOD", "units treated in the first period have no pre-period")
    if not (unit_cohort == NEVER).any():
        raise DidError("NO_NEVER_TREATED", "a never-treated comparison group is required")

    values = values[order]
    k = len(covariates)
    return PanelDataset(
        units=np.asarray(unit_labels),
        period_labels=tuple(lab.item() if hasattr(lab, "item") else lab for lab in labels),
        outcome=values[:, 0].reshape(n, T),
        covariates=values[:, 1:].reshape(n, T, k),
        covariate_names=tuple(covariates),
        cohort=unit_cohort,
    )


@dataclass(frozen=True)
class CohortDesign:
    """The (g, t) grid of a panel: treated cohorts, their sizes and ``T``."""

    cohorts: Tuple[int, ...]
    n_g: Dict[int, int]
    n_never: int
    T: int
    unit_cohorts: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "cohorts", tuple(sorted(int(g) for g in self.cohorts)))
        if not self.cohorts:
            raise DidError("NO_TREATED", "no treated cohort to estimate")
        for g in self.cohorts:
            if not 2 <= g <= self.T:
                raise DidError("COHORT_OUT_OF_RANGE", f"cohort {g} outside 2..{self.T}")
            if self.n_g.get(g, 0) < 1:
                raise DidError("EMPTY_CELL", f"cohort {g} has no units")
        if self.n_never < 1:
            raise DidError("NO_NEVER_TREATED", "a never-treated comparison group is required")

    @property
    def n_treated(self):
        return sum(self.n_g[g] for g in self.cohorts)

    @property
    def n_units(self):
        return self.n_treated + self.n_never

    @property
    def shares(self):
        """P(G = g | ever treated)."""
        total = self.n_treated
        return {g: self.n_g[g] / total for g in self.cohorts}

    def base_rule(self, g, t):
        return BaseRule.POST_BASE_G_MINUS_1 if t >= g else BaseRule.PRE_BASE_T_MINUS_1

    def base_period(self, g, t):
        return g - 1 if t >= g else t - 1

    def cells(self, include_pre=True):
        """All estimable (g, t) pairs, ordered by g then t."""
        out = []
        for g in self.cohorts:
            for t in range(2, self.T + 1):
                if t >= g or include_pre:
                    out.append((g, t))
        return out


def build_cohort_design(panel: PanelDataset) -> CohortDesign:
    cohorts, counts = np.unique(panel.cohort, return_counts=True)
    n_g = {int(g): int(c) for g, c in zip(cohorts, counts) if g != NEVER}
    return CohortDesign(
        cohorts=tuple(n_g),
        n_g=n_g,
        n_never=int(np.sum(panel.cohort == NEVER)),
        T=panel.T,
        unit_cohorts=panel.cohort,
    )


@dataclass(frozen=True, eq=False)
class DeltaSlice:
    """Outcome changes for one cell over cohort ``g`` and the never treated.

    ``dy`` is ``Y_t - Y_base``; ``X`` holds covariates at the base period;
    ``units`` indexes rows of the source panel.
    """

    g: int
    t: int
    base: int
    dy: np.ndarray
    X: np.ndarray
    treated: np.ndarray
    units: np.ndarray
    covariate_names: Tuple[str, ...] = ()

    @property
    def n_treated(self):
        return int(self.treated.sum())

    @property
    def n_control(self):
        return int((~self.treated).sum())

    @property
    def event_time(self):
        return self.t - self.g


def delta_slice(panel: PanelDataset, g, t) -> DeltaSlice:
    T = panel.T
    if not 2 <= t <= T:
        raise DidError("PERIOD_OUT_OF_RANGE", f"t={t} outside 2..{T}")
    base = g - 1 if t >= g else t - 1
    if base == t:
        raise DidError("BASE_EQUALS_TARGET", f"cell ({g}, {t}) differences a period against itself")
    if base < 1:
        raise DidError("PERIOD_OUT_OF_RANGE", f"cell ({g}, {t}) has no base period")
    is_g = panel.cohort == g
    if not is_g.any():
        raise DidError("EMPTY_CELL", f"cohort {g} has no units")
    units = np.flatnonzero(is_g | (panel.cohort == NEVER))
    Y = panel.outcome[units]
    return DeltaSlice(
        g=g,
        t=t,
        base=base,
        dy=Y[:, t - 1] - Y[:, base - 1],
        X=panel.covariates[units, base - 1, :],
        treated=is_g[units],
        units=units,
        covariate_names=panel.covariate_names,
    )


def restrict(panel: PanelDataset, cohorts=None, periods=None) -> PanelDataset:
    """Sub-panel keeping some treated cohorts (plus all never treated) and periods.

    ``cohorts`` and ``periods`` use the internal ``1..T`` scale. A kept cohort
    is relabelled to the first kept period at or after its adoption; it must
    have one, otherwise it would silently join the never treated.
    """
    periods = sorted(periods) if periods is not None else list(range(1, panel.T + 1))
    if cohorts is None:
        cohorts = [int(g) for g in np.unique(panel.cohort) if g != NEVER]
    keep_units = (panel.cohort == NEVER) | np.isin(panel.cohort, list(cohorts))
    relabel = {NEVER: "never"}
    for g in cohorts:
        after = [p for p in periods if p >= g]
        if not after:
            raise DidError("COHORT_NOT_TREATED_IN_WINDOW", f"cohort {g} is untreated in every kept period")
        relabel[g] = after[0]

    idx = np.flatnonzero(keep_units)
    cols = [p - 1 for p in periods]
    rows = []
    k = len(panel.covariate_names)
    for i in idx:
        g = relabel[int(panel.cohort[i])]
        for c, p in zip(cols, periods):
            rows.append((panel.units[i], p, panel.outcome[i, c], g, [panel.covariates[i, c, j] for j in range(k)]))
    sub = validate_panel(rows, covariates=list(panel.covariate_names))
    orig = [panel.period_labels[p - 1] for p in periods]
    return PanelDataset(
        units=sub.units,
        period_labels=tuple(orig),
        outcome=sub.outcome,
        covariates=sub.covariates,
        covariate_names=sub.covariate_names,
        cohort=sub.cohort,
    )

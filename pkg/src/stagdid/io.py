"""Result files: CSV and JSON writers with round-trip float text."""

import csv
import hashlib
import json
import math
import os

import numpy as np

from stagdid.sensitivity import RobustIntervalGrid, TrendComparison


def fmt(x):
    """Shortest round-trip text for a number; ``nan`` and ``inf`` spelled out."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def jsonable(obj):
    """Recursively convert to JSON types; NaN becomes null, infinities the strings ``"inf"``/``"-inf"``."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def write_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(jsonable(obj), fh, indent=2, sort_keys=False, allow_nan=False)
        fh.write("\n")


def write_rows(rows, header, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


GTATT_HEADER = ["g", "t", "e", "estimate", "se", "ci_lo", "ci_hi", "p", "flavor", "flags"]
EVENT_HEADER = ["e", "estimate", "se", "ci_lo", "ci_hi", "p", "ci_pct_lo", "ci_pct_hi", "n_cohorts"]


def write_gtatt(cells, panel, path):
    """One row per cell; ``g`` and ``t`` use the input period labels."""
    labels = panel.period_labels
    rows = [
        [labels[c.g - 1], labels[c.t - 1], c.e, c.estimate, c.se, c.ci[0], c.ci[1], c.p_value, c.flavor,
         ";".join(c.flags)]
        for c in cells
    ]
    write_rows(rows, GTATT_HEADER, path)


def aggregate_record(res, panel):
    labels = panel.period_labels
    if res.kind == "overall":
        weights = {str(labels[g - 1]): w for g, w in res.weights.items()}
    else:
        weights = [{"g": labels[g - 1], "t": labels[t - 1], "weight": w} for (g, t), w in res.weights.items()]
    key = res.key
    if res.kind == "group":
        key = labels[res.key - 1]
    return {
        "kind": res.kind,
        "key": key,
        "estimate": res.estimate,
        "se": res.se,
        "se_method": res.se_method,
        "ci": list(res.ci),
        "ci_percentile": list(res.ci_percentile),
        "p": res.p_value,
        "weights": weights,
    }


def write_aggregates(aggregates, panel, path):
    write_json({label: aggregate_record(r, panel) for label, r in aggregates.items()}, path)


def write_event_study(aggregates, path):
    rows = []
    for r in sorted((r for r in aggregates.values() if r.kind == "event"), key=lambda r: r.key):
        rows.append([r.key, r.estimate, r.se, r.ci[0], r.ci[1], r.p_value, r.ci_percentile[0],
                     r.ci_percentile[1], len(r.weights)])
    write_rows(rows, EVENT_HEADER, path)


def _param(p):
    return {"estimate": p.estimate, "se": p.se, "ci": list(p.ci), "p": p.p_value}


def comparison_record(tc: TrendComparison):
    return {
        "treated_cohort": tc.treated_cohort,
        "n_pre_periods": tc.n_pre_periods,
        "se_method": tc.se_method,
        "beta": _param(tc.beta),
        "beta_prime": _param(tc.beta_prime),
        "theta": _param(tc.theta),
        "difference": _param(tc.difference),
        "beta_k": tc.beta_k,
        "beta_prime_k": tc.beta_prime_k,
    }


def grid_record(grid: RobustIntervalGrid):
    return {
        "kind": grid.kind,
        "label": grid.label,
        "event_time": grid.event_time,
        "estimate": grid.estimate,
        "se": grid.se,
        "original_ci": list(grid.original_ci),
        "breakdown": grid.breakdown,
        "ci_at_breakdown": list(grid.ci_at_breakdown),
        "inputs": grid.inputs,
        "grid": [{"budget": b, "ci": [lo, hi]} for b, lo, hi in zip(grid.budgets, grid.lower, grid.upper)],
    }


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path

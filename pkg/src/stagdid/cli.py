"""Command-line interface: ``validate``, ``run``, ``sensitivity`` and ``simulate``.

Every failure exits nonzero and prints a JSON error record
``{"code": ..., "message": ...}`` to stderr; when the output directory is
writable the record is also saved as ``error.json``. Exit status 2 marks
configuration errors, 3 data or estimation errors, 4 file errors.
"""

import argparse
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from typing import List, Optional

import numpy as np
import pandas as pd

from stagdid import io
from stagdid.errors import DidError
from stagdid.estimators import CallawaySantAnna
from stagdid.panel import NEVER, restrict, validate_panel
from stagdid.sensitivity import bh_compare, robust_intervals
from stagdid.simlab import ScenarioSpec, gen_panel, write_panel_csv
from stagdid.twfe import staggered_twfe

OUTPUT_ENV = "STAGDID_OUTPUT_DIR"
DEFAULT_OUTPUT = "stagdid_out"
AGGREGATIONS = ("overall", "group", "event", "simple")
FORMATS = ("csv", "json")
EXIT_CONFIG, EXIT_DATA, EXIT_IO = 2, 3, 4


@dataclass
class RunConfig:
    """Everything a run depends on; echoed into the run manifest."""

    input: str
    unit: str = "unit"
    period: str = "period"
    outcome: str = "outcome"
    cohort: str = "cohort"
    covariates: List[str] = field(default_factory=list)
    square: List[str] = field(default_factory=list)
    flavor: str = "dr"
    control_group: str = "never_treated"
    aggregations: List[str] = field(default_factory=lambda: list(AGGREGATIONS))
    n_bootstrap: int = 999
    seed: Optional[int] = None
    mbar_grid: List[float] = field(default_factory=lambda: [round(0.1 * i, 10) for i in range(21)])
    m_grid: List[float] = field(default_factory=lambda: [round(0.05 * i, 10) for i in range(21)])
    output_dir: Optional[str] = None
    formats: List[str] = field(default_factory=lambda: list(FORMATS))
    n_jobs: int = 1
    twfe: bool = False

    def validate(self):
        if self.control_group != "never_treated":
            raise DidError("CONFIG_BAD_VALUE", "only the never-treated control group is supported")
        if self.flavor.lower() not in ("or", "ipw", "dr", "reg"):
            raise DidError("CONFIG_BAD_VALUE", f"unknown flavor {self.flavor!r}")
        bad = [a for a in self.aggregations if a not in AGGREGATIONS]
        if bad:
            raise DidError("CONFIG_BAD_VALUE", f"unknown aggregations {bad}")
        bad = [f for f in self.formats if f not in FORMATS]
        if bad:
            raise DidError("CONFIG_BAD_VALUE", f"unknown formats {bad}")
        if self.n_bootstrap < 0 or 0 < self.n_bootstrap < 100:
            raise DidError("CONFIG_BAD_VALUE", "bootstrap needs 0 or at least 100 replicates")
        if self.n_bootstrap and self.seed is None:
            raise DidError("CONFIG_MISSING_SEED", "bootstrap requested without a seed")
        if any(v < 0 for v in list(self.mbar_grid) + list(self.m_grid)):
            raise DidError("CONFIG_BAD_VALUE", "sensitivity grids must be nonnegative")
        if self.output_dir is None:
            self.output_dir = os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)
        return self

    @property
    def all_covariates(self):
        return list(self.covariates) + [f"{c}_sq" for c in self.square]

    @classmethod
    def from_sources(cls, args):
        """Defaults, then the ``--config`` JSON file, then explicit flags."""
        values = {}
        if getattr(args, "config", None):
            try:
                with open(args.config, encoding="utf-8") as fh:
                    values.update(json.load(fh))
            except OSError as exc:
                raise DidError("IO_READ_FAILED", f"cannot read config: {exc}") from None
            except json.JSONDecodeError as exc:
                raise DidError("CONFIG_PARSE_ERROR", f"config is not valid JSON: {exc}") from None
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise DidError("CONFIG_UNKNOWN_KEY", f"unknown config keys {unknown}")
        for name in known:
            v = getattr(args, name, None)
            if v is not None:
                values[name] = v
        if "input" not in values:
            raise DidError("CONFIG_MISSING_INPUT", "no input file given")
        return cls(**values).validate()


def read_panel_csv(config: RunConfig):
    """Read the input CSV, check the header against the config and build the panel."""
    try:
        frame = pd.read_csv(config.input, dtype={config.cohort: str}, float_precision="round_trip",
                            encoding="utf-8")
    except FileNotFoundError:
        raise DidError("IO_READ_FAILED", f"no such file {config.input!r}") from None
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DidError("IO_READ_FAILED", f"cannot read {config.input!r}: {exc}") from None
    wanted = [config.unit, config.period, config.outcome, config.cohort, *config.covariates, *config.square]
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise DidError("CONFIG_UNKNOWN_COLUMN", f"columns not in input header: {missing}")
    for c in config.square:
        frame[f"{c}_sq"] = pd.to_numeric(frame[c], errors="coerce") ** 2
    return validate_panel(frame, config.unit, config.period, config.outcome, config.cohort,
                          config.all_covariates)


def fit_model(config: RunConfig, panel):
    return CallawaySantAnna(
        estimation_method=config.flavor, covariates=config.all_covariates, n_bootstrap=config.n_bootstrap,
        seed=config.seed, n_jobs=config.n_jobs,
    ).fit(panel)


def _error_record(exc):
    return {"code": exc.code, "message": exc.message}


def sensitivity_report(config: RunConfig, panel, model):
    """Trend comparisons per cohort and robust-interval grids per post event time.

    Items that cannot be computed (for example a cohort with one
    pre-period) carry an error record instead of failing the run.
    """
    comparisons = {}
    for g in model.design_.cohorts:
        label = str(panel.period_labels[g - 1])
        try:
            sub = restrict(panel, cohorts=[g])
            tc = bh_compare(sub, config.all_covariates, config.n_bootstrap, config.seed)
            comparisons[label] = io.comparison_record(tc)
        except DidError as exc:
            comparisons[label] = {"error": _error_record(exc)}
    grids = {}
    post = sorted(r.key for r in model.aggregates_.values() if r.kind == "event" and r.key >= 0)
    for e in post:
        try:
            rm, sm = robust_intervals(model.aggregates_, e, config.mbar_grid, config.m_grid)
            grids[str(e)] = {"relative_magnitudes": io.grid_record(rm), "smoothness": io.grid_record(sm)}
        except DidError as exc:
            grids[str(e)] = {"error": _error_record(exc)}
    return {"trend_comparison": comparisons, "robust_intervals": grids}


def _versions():
    import joblib
    import scipy
    import sklearn

    from stagdid import __version__

    return {"stagdid": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__, "scikit-learn": sklearn.__version__,
            "joblib": joblib.__version__}


def write_manifest(config: RunConfig, command, outputs):
    manifest = {
        "command": command,
        "config": asdict(config),
        "seed": config.seed,
        "input_sha256": io.sha256_file(config.input),
        "outputs": sorted(outputs),
        "versions": _versions(),
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    io.write_json(manifest, os.path.join(config.output_dir, "run_manifest.json"))


def _out(config, name):
    return os.path.join(config.output_dir, name)


def cmd_run(config: RunConfig):
    panel = read_panel_csv(config)
    model = fit_model(config, panel)
    io.ensure_dir(config.output_dir)
    aggs = {k: r for k, r in model.aggregates_.items() if r.kind in config.aggregations}
    written = []
    if "csv" in config.formats:
        io.write_gtatt(model.cells_, panel, _out(config, "gtatt.csv"))
        io.write_event_study(model.aggregates_, _out(config, "eventstudy.csv"))
        written += ["gtatt.csv", "eventstudy.csv"]
    if "json" in config.formats:
        io.write_aggregates(aggs, panel, _out(config, "aggregates.json"))
        io.write_json(sensitivity_report(config, panel, model), _out(config, "sensitivity.json"))
        written += ["aggregates.json", "sensitivity.json"]
        if config.twfe:
            io.write_json(_twfe_record(panel, config), _out(config, "twfe.json"))
            written.append("twfe.json")
    write_manifest(config, "run", written)
    return 0


def _twfe_record(panel, config):
    r = staggered_twfe(panel, config.all_covariates)
    return {"estimate": r.estimate, "se": r.se, "ci": list(r.ci), "p": r.p_value, "flavor": r.flavor,
            "n_units": r.n_units, "n_clusters": r.n_clusters, "metadata": r.metadata}


def cmd_sensitivity(config: RunConfig):
    panel = read_panel_csv(config)
    model = fit_model(config, panel)
    io.ensure_dir(config.output_dir)
    io.write_json(sensitivity_report(config, panel, model), _out(config, "sensitivity.json"))
    write_manifest(config, "sensitivity", ["sensitivity.json"])
    return 0


def cmd_validate(config: RunConfig):
    panel = read_panel_csv(config)
    counts = {str(panel.period_labels[g - 1]) if g != NEVER else "never": int(n)
              for g, n in zip(*np.unique(panel.cohort, return_counts=True))}
    summary = {"n_units": panel.n_units, "T": panel.T, "periods": list(panel.period_labels),
               "cohort_sizes": counts, "covariates": list(panel.covariate_names)}
    print(json.dumps(io.jsonable(summary), indent=2))
    return 0


def cmd_simulate(args):
    spec = _load_scenario(args.scenario, args.seed)
    out = args.output_dir or os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)
    io.ensure_dir(out)
    panel, truth = gen_panel(spec, args.replication)
    write_panel_csv(panel, os.path.join(out, "panel.csv"))
    io.write_json({
        "tau": [{"g": g, "t": t, "tau": v} for (g, t), v in sorted(truth.items())],
        "cohort_sizes": {str(g): int((panel.cohort == g).sum()) for g in sorted(spec.n_per_cohort)},
        "n_never": int((panel.cohort == NEVER).sum()),
        "scenario": spec.to_dict(),
        "replication": args.replication,
    }, os.path.join(out, "truth.json"))
    return 0


def _load_scenario(path, seed=None):
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except OSError as exc:
        raise DidError("IO_READ_FAILED", f"cannot read scenario: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DidError("CONFIG_PARSE_ERROR", f"scenario is not valid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise DidError("CONFIG_PARSE_ERROR", "scenario must be a JSON object")
    if seed is not None:
        values["seed"] = seed
    values.setdefault("seed", None)
    try:
        return ScenarioSpec.from_dict(values)
    except (TypeError, ValueError, AttributeError) as exc:
        raise DidError("CONFIG_PARSE_ERROR", f"bad scenario file: {exc}") from None


def _csv_list(cast=str):
    def parse(text):
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    return parse


def _add_run_flags(p, need_output=True):
    p.add_argument("input", nargs="?", help="panel CSV (unit, period, outcome, cohort, covariates)")
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--unit")
    p.add_argument("--period")
    p.add_argument("--outcome")
    p.add_argument("--cohort")
    p.add_argument("--covariates", type=_csv_list(), help="comma-separated covariate columns")
    p.add_argument("--square", type=_csv_list(), help="columns whose squares enter as <name>_sq")
    p.add_argument("--flavor", choices=["or", "ipw", "dr", "reg"])
    p.add_argument("--aggregations", type=_csv_list(), help=f"subset of {','.join(AGGREGATIONS)}")
    p.add_argument("--bootstrap", dest="n_bootstrap", type=int, help="replicates (0 for analytic SEs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mbar-grid", dest="mbar_grid", type=_csv_list(float))
    p.add_argument("--m-grid", dest="m_grid", type=_csv_list(float))
    p.add_argument("--formats", type=_csv_list(), help="subset of csv,json")
    p.add_argument("--n-jobs", dest="n_jobs", type=int)
    if need_output:
        p.add_argument("--output-dir", "-o", dest="output_dir",
                       help=f"defaults to ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT}")


def build_parser():
    parser = argparse.ArgumentParser(prog="stagdid", description="Staggered difference-in-differences.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("validate", help="check a panel CSV and print its shape"), need_output=False)
    run = sub.add_parser("run", help="estimate cells, summaries and sensitivity")
    _add_run_flags(run)
    run.add_argument("--twfe", action="store_const", const=True, help="also write the two-way FE estimate")
    _add_run_flags(sub.add_parser("sensitivity", help="write sensitivity.json only"))
    sim = sub.add_parser("simulate", help="generate a synthetic panel from a scenario JSON")
    sim.add_argument("scenario")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--replication", type=int)
    sim.add_argument("--output-dir", "-o", dest="output_dir")
    return parser


def _report(exc: DidError, output_dir):
    record = {"code": exc.code, "message": exc.message}
    print(json.dumps(record), file=sys.stderr)
    if output_dir:
        try:
            io.ensure_dir(output_dir)
            io.write_json(record, os.path.join(output_dir, "error.json"))
        except OSError:
            pass
    if exc.code.startswith("CONFIG_"):
        return EXIT_CONFIG
    if exc.code.startswith("IO_"):
        return EXIT_IO
    return EXIT_DATA


def main(argv=None):
    args = build_parser().parse_args(argv)
    output_dir = getattr(args, "output_dir", None) or os.environ.get(OUTPUT_ENV)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "validate":
            args.output_dir = None
            args.n_bootstrap = 0
        config = RunConfig.from_sources(args)
        output_dir = config.output_dir if args.command != "validate" else None
        handler = {"run": cmd_run, "sensitivity": cmd_sensitivity, "validate": cmd_validate}[args.command]
        return handler(config)
    except DidError as exc:
        return _report(exc, output_dir)
    except OSError as exc:
        return _report(DidError("IO_WRITE_FAILED", str(exc)), None)


if __name__ == "__main__":
    sys.exit(main())

"""Staggered-adoption difference-in-differences with sensitivity analysis."""

from stagdid.aggregate import AggregationResult, agg_event, agg_group, agg_overall, agg_simple, aggregate_all
from stagdid.csdid import GtattCell, estimate_cell, gtatt_table, overlap_report
from stagdid.errors import DidError
from stagdid.estimators import BilinskiHatfield, CallawaySantAnna
from stagdid.inference import BootstrapResult, apply_bootstrap, bootstrap_inference
from stagdid.numkit import DesignMatrix, LogisticIRLS, cluster_robust_vcov, logit_fit, ols_fit
from stagdid.panel import (
    NEVER,
    BaseRule,
    CohortDesign,
    DeltaSlice,
    PanelDataset,
    build_cohort_design,
    delta_slice,
    restrict,
    validate_panel,
)
from stagdid.sensitivity import (
    RobustIntervalGrid,
    TrendComparison,
    bh_compare,
    robust_intervals,
    rr_relative_magnitudes,
    rr_smoothness,
)
from stagdid.simlab import ScenarioSpec, gen_panel, oracle_gtatt, reference_scenario, twfe_bias_demo
from stagdid.twfe import TwfeEstimate, TwoWayFixedEffects, staggered_twfe, two_by_two_did

__version__ = "0.1.0"

__all__ = [
    "NEVER",
    "AggregationResult",
    "BaseRule",
    "BilinskiHatfield",
    "BootstrapResult",
    "CallawaySantAnna",
    "CohortDesign",
    "DeltaSlice",
    "DesignMatrix",
    "DidError",
    "GtattCell",
    "LogisticIRLS",
    "PanelDataset",
    "RobustIntervalGrid",
    "ScenarioSpec",
    "TrendComparison",
    "TwfeEstimate",
    "TwoWayFixedEffects",
    "agg_event",
    "agg_group",
    "agg_overall",
    "agg_simple",
    "aggregate_all",
    "apply_bootstrap",
    "bh_compare",
    "bootstrap_inference",
    "build_cohort_design",
    "cluster_robust_vcov",
    "delta_slice",
    "estimate_cell",
    "gen_panel",
    "gtatt_table",
    "logit_fit",
    "ols_fit",
    "oracle_gtatt",
    "overlap_report",
    "reference_scenario",
    "restrict",
    "robust_intervals",
    "rr_relative_magnitudes",
    "rr_smoothness",
    "staggered_twfe",
    "twfe_bias_demo",
    "two_by_two_did",
    "validate_panel",
]

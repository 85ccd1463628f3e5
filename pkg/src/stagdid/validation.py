"""Input checks shared by the estimator classes."""

import numbers

import numpy as np

from stagdid.errors import DidError
from stagdid.panel import PanelDataset, validate_panel

FLAVORS = ("or", "ipw", "dr")


def check_panel(data, covariates=None, unit="unit", period="period", outcome="outcome", cohort="cohort"):
    """Return a :class:`PanelDataset`, validating raw input when needed.

    Also checks that every requested covariate exists on the panel.
    """
    if isinstance(data, PanelDataset):
        panel = data
    else:
        panel = validate_panel(data, unit=unit, period=period, outcome=outcome, cohort=cohort,
                               covariates=covariates)
    for name in covariates or ():
        if name not in panel.covariate_names:
            raise DidError("UNKNOWN_COVARIATE", f"panel has no covariate {name!r}")
    return panel


def check_flavor(flavor):
    f = str(flavor).lower()
    if f == "reg":
        f = "or"
    if f not in FLAVORS:
        raise DidError("BAD_PARAMETER", f"estimation method must be one of {FLAVORS}, got {flavor!r}")
    return f


def check_seed(seed, required=True):
    if seed is None:
        if required:
            raise DidError("CONFIG_MISSING_SEED", "a seed is required for resampling or simulation")
        return None
    if not isinstance(seed, (numbers.Integral, np.integer)) or seed < 0:
        raise DidError("BAD_PARAMETER", f"seed must be a nonnegative integer, got {seed!r}")
    return int(seed)


def check_n_bootstrap(B):
    if B and B < 100:
        raise DidError("BAD_PARAMETER", f"bootstrap needs at least 100 replicates, got {B}")
    return int(B or 0)

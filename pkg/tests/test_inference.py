import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stagdid.aggregate import aggregate_all
from stagdid.csdid import gtatt_table
from stagdid.errors import DidError
from stagdid.inference import (
    apply_bootstrap,
    bootstrap_inference,
    cell_label,
    replicate_rng,
    replicate_se,
    stratified_indices,
)
from stagdid.panel import build_cohort_design
from stagdid.simlab import ScenarioSpec, gen_panel


@given(seed=st.integers(0, 2**32 - 1), r=st.integers(0, 10_000))
def test_stratified_resample_keeps_strata(seed, r):
    strata = np.random.default_rng(seed).integers(0, 4, size=50)
    idx = stratified_indices(strata, replicate_rng(seed, r))
    assert len(idx) == 50
    np.testing.assert_array_equal(np.sort(strata[idx]), np.sort(strata))


def test_replicate_streams_depend_only_on_seed_and_index():
    a = replicate_rng(7, 3).random(5)
    assert np.array_equal(a, replicate_rng(7, 3).random(5))
    assert not np.array_equal(a, replicate_rng(7, 4).random(5))
    assert not np.array_equal(a, replicate_rng(8, 3).random(5))


def test_replicate_se():
    assert replicate_se([2.0] * 10) == 0.0
    assert replicate_se([1.0, 3.0]) == pytest.approx(np.sqrt(2.0))
    assert np.isnan(replicate_se([np.nan, 1.0]))


def _panel(noise_sd, seed=4):
    spec = ScenarioSpec({2: 15, 3: 20}, 40, 4, seed=seed, tau=lambda g, t: 1.0 + t - g, noise_sd=noise_sd,
                        unit_sd=0.0, trend_coef=0.0, assignment="fixed")
    return gen_panel(spec)[0]


def test_zero_noise_gives_zero_se():
    panel = _panel(0.0)
    # outcomes differ across units only through covariate levels, which drop out of changes
    boot = bootstrap_inference(panel, build_cohort_design(panel), [], "dr", B=100, seed=1)
    for label, draws in boot.draws.items():
        assert np.ptp(draws) < 1e-9, label
        assert boot.se(label) < 1e-9


def test_determinism_and_parallel_equivalence():
    panel = _panel(1.0)
    design = build_cohort_design(panel)
    a = bootstrap_inference(panel, design, ["x1"], "dr", B=120, seed=11)
    b = bootstrap_inference(panel, design, ["x1"], "dr", B=120, seed=11, n_jobs=2)
    c = bootstrap_inference(panel, design, ["x1"], "dr", B=120, seed=12)
    assert set(a.draws) == set(b.draws)
    for k in a.draws:
        assert a.draws[k].tobytes() == b.draws[k].tobytes()
    assert not np.array_equal(a.draws["overall"], c.draws["overall"])


def test_bootstrap_preconditions():
    panel = _panel(1.0)
    design = build_cohort_design(panel)
    with pytest.raises(DidError) as err:
        bootstrap_inference(panel, design, B=50, seed=1)
    assert err.value.code == "BAD_PARAMETER"
    with pytest.raises(DidError) as err:
        bootstrap_inference(panel, design, B=100)
    assert err.value.code == "CONFIG_MISSING_SEED"


def test_apply_bootstrap_replaces_inference():
    panel = _panel(1.0)
    design = build_cohort_design(panel)
    cells = gtatt_table(panel, design)
    aggs = aggregate_all(cells, design)
    boot = bootstrap_inference(panel, design, [], "dr", B=200, seed=3)
    new_cells, new_aggs = apply_bootstrap(cells, aggs, boot)
    for old, new in zip(cells, new_cells):
        assert new.estimate == old.estimate
        assert new.se == boot.se(cell_label(new.g, new.t))
        assert new.ci == pytest.approx((new.estimate - 1.96 * new.se, new.estimate + 1.96 * new.se))
        lo, hi = new.ci_percentile
        assert lo < hi
    for label, res in new_aggs.items():
        assert res.se_method == "bootstrap" and res.draws is boot.draws[label]
        # analytic and bootstrap standard errors target the same quantity
        assert res.se == pytest.approx(aggs[label].se, rel=0.3)

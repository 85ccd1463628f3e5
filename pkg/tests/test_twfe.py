import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from stagdid.errors import DidError
from stagdid.panel import NEVER, PanelDataset
from stagdid.simlab import ScenarioSpec, gen_panel, true_cell_weighted_att
from stagdid.twfe import (
    STAGGERED_INDICATOR,
    TWO_BY_TWO,
    TwoWayFixedEffects,
    normal_inference,
    percent_increase,
    staggered_twfe,
    two_by_two_did,
)


def _panel(y, cohort, X=None, names=()):
    y = np.asarray(y, dtype=float)
    n, T = y.shape
    X = np.zeros((n, T, 0)) if X is None else X
    return PanelDataset(np.arange(n), tuple(range(1, T + 1)), y, X, tuple(names), np.asarray(cohort))


def test_difference_of_mean_changes():
    # treated changes 4 and 6 (mean 5), control changes 2 and 4 (mean 3)
    panel = _panel([[1, 5], [0, 6], [2, 4], [1, 5]], [2, 2, NEVER, NEVER])
    res = two_by_two_did(panel)
    assert res.estimate == pytest.approx(2.0, abs=1e-12)
    assert res.flavor == TWO_BY_TWO and res.n_clusters == 4
    lo, hi = res.ci
    assert lo == pytest.approx(res.estimate - 1.96 * res.se) and hi == pytest.approx(res.estimate + 1.96 * res.se)


def test_period_shift_is_absorbed():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(30, 2))
    g = np.where(np.arange(30) < 10, 2, NEVER)
    shifted = y + np.array([0.0, 17.5])
    assert two_by_two_did(_panel(shifted, g)).estimate == pytest.approx(two_by_two_did(_panel(y, g)).estimate,
                                                                       abs=1e-10)


def test_covariate_trend_recovered_when_modelled():
    rng = np.random.default_rng(1)
    n = 60
    g = np.where(np.arange(n) < 25, 2, NEVER)
    x = rng.normal(size=(n, 2)) + (g == 2)[:, None] * np.array([0.0, 1.5])
    y = rng.normal(size=(n, 1)) * 3 + np.array([10.0, 12.0]) + 0.8 * x + 2.0 * (g == 2)[:, None] * [0, 1]
    panel = _panel(y, g, x[:, :, None], ["x1"])
    res = two_by_two_did(panel, ["x1"])
    assert res.estimate == pytest.approx(2.0, abs=1e-6)
    assert res.covariate_coefs["x1"] == pytest.approx(0.8, abs=1e-6)
    # leaving the covariate out absorbs its trend into the effect
    assert abs(two_by_two_did(panel).estimate - 2.0) > 0.5


@given(seed=st.integers(0, 2**32 - 1))
def test_no_covariate_two_by_two_is_difference_of_means(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 80))
    g = np.full(n, NEVER)
    g[: max(1, n // 3)] = 2
    y = rng.normal(size=(n, 2)) * 5
    dy = y[:, 1] - y[:, 0]
    res = two_by_two_did(_panel(y, g))
    assert res.estimate == pytest.approx(dy[g == 2].mean() - dy[g == NEVER].mean(), abs=1e-9)


@given(seed=st.integers(0, 2**32 - 1))
def test_time_constant_covariate_changes_nothing(seed):
    rng = np.random.default_rng(seed)
    n, T = int(rng.integers(6, 40)), int(rng.integers(2, 5))
    g = rng.choice([NEVER, 2], size=n)
    g[0], g[1] = 2, NEVER
    y = rng.normal(size=(n, T))
    xc = np.repeat(rng.normal(size=(n, 1, 1)), T, axis=1)
    base = staggered_twfe(_panel(y, g))
    with_x = staggered_twfe(_panel(y, g, xc, ["const_x"]), ["const_x"])
    assert with_x.estimate == pytest.approx(base.estimate, abs=1e-8)


def test_staggered_equals_two_by_two_for_one_cohort_two_periods():
    rng = np.random.default_rng(2)
    g = np.where(np.arange(20) < 8, 2, NEVER)
    panel = _panel(rng.normal(size=(20, 2)), g)
    a, b = staggered_twfe(panel), two_by_two_did(panel)
    assert a.estimate == pytest.approx(b.estimate, abs=1e-12)
    assert a.se == pytest.approx(b.se, abs=1e-12)


def _scenario(tau, T=4):
    return ScenarioSpec({2: 20, 3: 30}, 50, T, seed=3, tau=tau, noise_sd=0.0, assignment="fixed", trend_coef=0.0)


@pytest.mark.parametrize("tau", [lambda g, t: 1.7, lambda g, t: 0.0])
def test_homogeneous_effects_are_recovered(tau):
    spec = _scenario(tau)
    panel, _ = gen_panel(spec)
    res = staggered_twfe(panel)
    assert res.estimate == pytest.approx(tau(2, 2), abs=1e-8)
    assert res.metadata["warning"] == "biased under heterogeneous dynamic effects"
    assert res.flavor == STAGGERED_INDICATOR


def _dummy_twfe(panel):
    n, T = panel.outcome.shape
    rows, y = [], []
    for i in range(n):
        for t in range(T):
            r = np.zeros(n + T)
            r[i] = 1.0
            if t > 0:
                r[n + t - 1] = 1.0
            g = panel.cohort[i]
            r[-1] = float(g != NEVER and t + 1 >= g)
            rows.append(r)
            y.append(panel.outcome[i, t])
    beta, *_ = np.linalg.lstsq(np.array(rows), np.array(y), rcond=None)
    return beta[-1]


def test_dynamic_effects_bias_matches_dummy_oracle():
    spec = _scenario(lambda g, t: t - g + 1)
    panel, _ = gen_panel(spec)
    res = staggered_twfe(panel)
    truth = true_cell_weighted_att(spec, panel)
    oracle = _dummy_twfe(panel)
    assert res.estimate == pytest.approx(oracle, abs=1e-8)
    # growing effects contaminate the later cohort's comparisons: TWFE understates
    assert res.estimate - truth < -0.1


def test_errors():
    panel = _panel(np.zeros((3, 3)), [2, 3, NEVER])
    with pytest.raises(DidError) as err:
        two_by_two_did(panel)
    assert err.value.code == "MORE_THAN_TWO_PERIODS"


@pytest.mark.parametrize("att, mean, expected, tol", [(0.0, 40.0, 0.0, 0.0), (5.0, 105.0, 5.0, 1e-12),
                                                      (1.7, 40.34, 4.40, 0.01)])
def test_percent_increase(att, mean, expected, tol):
    assert percent_increase(att, mean) == pytest.approx(expected, abs=tol)


def test_percent_increase_rejects_nonpositive_counterfactual():
    with pytest.raises(DidError) as err:
        percent_increase(5.0, 5.0)
    assert err.value.code == "NONPOSITIVE_COUNTERFACTUAL"


@given(a=st.floats(-50, 50), b=st.floats(-50, 50), m=st.floats(51, 500))
def test_percent_increase_is_increasing(a, b, m):
    lo, hi = sorted((a, b))
    assert percent_increase(lo, m) <= percent_increase(hi, m)


@given(est=st.floats(-100, 100), se=st.floats(1e-3, 50))
def test_normal_inference_invariants(est, se):
    lo, hi, p = normal_inference(est, se)
    assert lo == est - 1.96 * se and hi == est + 1.96 * se
    assert 0.0 <= p <= 1.0
    assert (p < 0.05) == (abs(est) / se > 1.959963984540054) or abs(abs(est) / se - 1.96) < 1e-3


def test_estimator_api(reference_like):
    est = TwoWayFixedEffects()
    assert clone(est).get_params() == {"covariates": None, "kind": "auto"}
    est.fit(reference_like)
    assert est.result_.flavor == STAGGERED_INDICATOR
    assert est.att_ == est.result_.estimate
    with pytest.raises(DidError):
        TwoWayFixedEffects(kind="bogus").fit(reference_like)

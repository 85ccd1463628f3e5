import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from stagdid.errors import DidError
from stagdid.estimators import BilinskiHatfield, CallawaySantAnna
from stagdid.simlab import REFERENCE_TAU, ScenarioSpec, gen_panel


def test_params_round_trip():
    est = CallawaySantAnna(estimation_method="ipw", covariates=["x1"], n_bootstrap=200, seed=3)
    params = est.get_params()
    assert params["estimation_method"] == "ipw" and params["seed"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(n_jobs=2)
    assert est.n_jobs == 2


def test_fitted_attributes(reference_like):
    est = CallawaySantAnna(covariates=["x1"]).fit(reference_like)
    assert est.design_.cohorts == (2, 3)
    assert len(est.cells_) == 5 + 1
    assert est.att_ == est.aggregates_["overall"].estimate
    assert est.cell(2, 4).e == 2
    assert est.aggregate("group", 3) is est.aggregates_["group:3"]
    assert est.bootstrap_ is None
    for (g, t), v in REFERENCE_TAU.items():
        assert abs(est.cell(g, t).estimate - v) < 5 * est.cell(g, t).se


def test_missing_lookups(reference_like):
    est = CallawaySantAnna().fit(reference_like)
    for call in (lambda: est.cell(3, 2.5), lambda: est.aggregate("event", 7)):
        with pytest.raises(DidError) as err:
            call()
        assert err.value.code == "MISSING_CELL"


def test_unfitted_access_raises():
    with pytest.raises(NotFittedError):
        CallawaySantAnna().summary()


def test_summary_and_event_study(reference_like):
    est = CallawaySantAnna(covariates=["x1"]).fit(reference_like)
    table = est.summary()
    assert list(table.columns) == ["g", "t", "e", "estimate", "se", "ci_lo", "ci_hi", "p", "flavor", "flags"]
    assert len(table) == 6 and (table["flavor"] == "dr").all()
    es = est.event_study()
    assert list(es["e"]) == [-1, 0, 1, 2]
    assert list(es["n_cohorts"]) == [1, 2, 2, 1]
    assert es["ci_pct_lo"].isna().all()
    assert (es["ci_lo"] < es["estimate"]).all() and (es["estimate"] < es["ci_hi"]).all()


def test_dataframe_input(small_frame):
    est = CallawaySantAnna(estimation_method="or").fit(small_frame)
    assert est.panel_.period_labels == (2001, 2002, 2003)
    assert est.design_.cohorts == (2, 3)


@pytest.mark.parametrize("kwargs, code", [(dict(estimation_method="ml"), "BAD_PARAMETER"),
                                          (dict(n_bootstrap=200), "CONFIG_MISSING_SEED"),
                                          (dict(n_bootstrap=-1), "BAD_PARAMETER")])
def test_parameter_checks_happen_in_fit(reference_like, kwargs, code):
    est = CallawaySantAnna(**kwargs)
    with pytest.raises(DidError) as err:
        est.fit(reference_like)
    assert err.value.code == code


def test_bootstrap_fit_fills_percentile_intervals():
    panel, _ = gen_panel(ScenarioSpec({2: 40, 3: 40}, 80, 4, seed=2, tau=dict(REFERENCE_TAU)))
    est = CallawaySantAnna(covariates=["x1"], n_bootstrap=120, seed=5).fit(panel)
    assert est.bootstrap_.B == 120 and est.bootstrap_.seed == 5
    c = est.cell(2, 3)
    assert c.se == pytest.approx(est.bootstrap_.se("cell:2,3"))
    lo, hi = c.ci_percentile
    assert lo < c.estimate < hi
    assert not est.event_study()["ci_pct_lo"].isna().any()


def test_overlap_report(reference_like):
    rep = CallawaySantAnna(covariates=["x1"]).fit(reference_like).overlap()
    assert set(zip(rep["g"], rep["t"])) >= set(REFERENCE_TAU)
    assert (rep["max_control_pscore"] < 0.9).all() and not rep["flagged"].any()


def test_robust_intervals_method(reference_like):
    est = CallawaySantAnna(covariates=["x1"]).fit(reference_like)
    rm, sm = est.robust_intervals(1, np.linspace(0, 2, 5), np.linspace(0, 1, 5))
    assert rm.interval(0) == pytest.approx(est.aggregate("event", 1).ci)
    assert sm.event_time == 1


def test_bilinski_hatfield_clone_and_fit():
    panel, _ = gen_panel(ScenarioSpec({3: 50}, 60, 5, seed=4, tau=lambda g, t: 1.0, violation=0.5, trend_coef=0.0))
    est = clone(BilinskiHatfield(cohort=3))
    est.fit(panel)
    res = est.result_
    assert res.treated_cohort == 3
    assert res.theta.estimate == pytest.approx(0.5, abs=0.5)
    assert res.beta_prime.estimate == pytest.approx(1.0, abs=1.0)

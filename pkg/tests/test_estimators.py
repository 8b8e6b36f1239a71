import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from crossfactorial import REMLMixedModel, StratumANOVA
from crossfactorial._validation import check_design_frame, check_response
from crossfactorial.anova import anova
from crossfactorial.design import DesignSpec, randomise
from crossfactorial.exceptions import ConfigurationError
from crossfactorial.reml import fit_reml

from conftest import RUNNING


@pytest.fixture
def frame_and_y():
    table = randomise(DesignSpec(**RUNNING["a"], seed=12))
    rng = np.random.default_rng(12)
    t = table.factor("T")
    y = 0.3 * np.where(table.intervention == 0, 1, -1) + rng.normal(0, .4, t.n_levels)[t.level_of]
    y = y + rng.normal(size=table.n_units)
    X = np.column_stack([table.centre, table.batch, table.therapist, table.intervention])
    return table, X, y


def test_get_params_and_clone():
    est = REMLMixedModel(formula="y~I+(1|T)", max_iter=50)
    params = est.get_params()
    assert params["formula"] == "y~I+(1|T)" and params["max_iter"] == 50
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert StratumANOVA(allow_negative=True).get_params() == {"formula": None, "allow_negative": True}


def test_set_params_round_trip():
    est = StratumANOVA().set_params(allow_negative=True)
    assert est.allow_negative


def test_reml_estimator_matches_function(frame_and_y):
    table, X, y = frame_and_y
    est = REMLMixedModel().fit(X, y)
    fit = fit_reml(y, table)
    assert est.coef_ == pytest.approx(fit.coef, rel=1e-10)
    assert est.satterthwaite_df_ == pytest.approx(fit.satterthwaite_df)
    pred = est.predict(X)
    assert pred == pytest.approx(fit.delta0 + fit.delta1 * np.where(table.intervention == 0, 1, -1))


def test_reml_formula_and_terms_agree(frame_and_y):
    _, X, y = frame_and_y
    a = REMLMixedModel(formula="y~I+(1|T)+(1|I:T)").fit(X, y)
    b = REMLMixedModel(random_terms=["T", "I:T"]).fit(X, y)
    assert a.coef_ == pytest.approx(b.coef_)


def test_anova_estimator(frame_and_y):
    table, X, y = frame_and_y
    est = StratumANOVA(formula="y~I+Error(T+I:T)").fit(X, y)
    ref = anova(y, table)
    assert est.test_.statistic == pytest.approx(ref.test("I").statistic)
    pred = est.predict(X)
    assert pred[table.intervention == 0] == pytest.approx(y[table.intervention == 0].mean())
    # population prediction is the arm mean, so the score is the between-arm R^2
    assert 0 <= est.score(X, y) < 1


def test_mapping_frame(frame_and_y):
    table, _, y = frame_and_y
    frame = {"intervention": table.intervention, "therapist": table.therapist}
    est = REMLMixedModel().fit(frame, y)
    assert est.fit_.satterthwaite_df == pytest.approx(15.0, rel=1e-6)


def test_predict_before_fit(frame_and_y):
    _, X, _ = frame_and_y
    with pytest.raises(NotFittedError):
        REMLMixedModel().predict(X)
    with pytest.raises(NotFittedError):
        StratumANOVA().predict(X)


def test_unseen_level_rejected(frame_and_y):
    _, X, y = frame_and_y
    est = REMLMixedModel().fit(X, y)
    bad = X.copy()
    bad[0, 3] = 5
    with pytest.raises(ConfigurationError):
        est.predict(bad)


@pytest.mark.parametrize("X", [np.zeros((4, 3)), {"therapist": [0, 1]}, np.full((4, 4), 0.5)])
def test_bad_frames(X):
    with pytest.raises(ConfigurationError):
        check_design_frame(X)


def test_bad_responses():
    with pytest.raises(ConfigurationError):
        check_response(np.zeros((3, 2)))
    with pytest.raises(ConfigurationError):
        check_response([1.0, np.inf])
    with pytest.raises(ConfigurationError):
        check_response([1.0, 2.0], n_units=3)
    assert check_response(np.ones((3, 1))).shape == (3,)


def test_frame_infers_shape(frame_and_y):
    _, X, _ = frame_and_y
    assert check_design_frame(X).spec.letter == "a"

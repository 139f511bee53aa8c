import warnings

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from crcrisk import clinical as cl
from crcrisk.errors import ConfigError, FormatError
from crcrisk.evalstat import auc
from oracles import gradcheck

F = cl.Findings

# (follow-up findings, expected label)
DECISION_TABLE = [
    ([], 0),
    ([F(size_mm=12.0, time_years=3.0)], 1),
    ([F(size_mm=12.0, time_years=6.0)], 0),
    ([F(size_mm=10.0, time_years=1.0)], 1),
    ([F(size_mm=9.9, time_years=1.0)], 0),
    ([F(size_mm=4.0, villous=True, time_years=2.0)], 1),
    ([F(size_mm=4.0, high_grade_dysplasia=True, time_years=4.9)], 1),
    ([F(size_mm=6.0, kind="serrated", serrated_with_dysplasia=True, time_years=2.0)], 1),
    ([F(size_mm=15.0, kind="serrated", time_years=2.0)], 0),
    ([F(size_mm=25.0, kind="hyperplastic", time_years=1.0)], 0),
    ([F(kind="crc", is_crc=True, time_years=5.0)], 1),
    ([F(size_mm=3.0, time_years=1.0), F(size_mm=11.0, villous=True, time_years=7.5)], 0),
]


@pytest.mark.parametrize("followup,expected", DECISION_TABLE)
def test_outcome_decision_table(followup, expected):
    assert cl.label_high_risk(followup) == expected


def test_outcome_rejects_negative_time():
    with pytest.raises(ValueError):
        cl.label_high_risk([F(time_years=-1.0)])


def test_default_schema_width():
    assert cl.PAPER_SCHEMA.width == 69
    assert cl.PAPER_SCHEMA.select("microscopy").names == ["most_advanced_adenoma", "most_advanced_serrated"]


def test_schema_round_trip_and_errors():
    assert cl.parse_schema(cl.PAPER_SCHEMA.dumps()) == cl.PAPER_SCHEMA
    with pytest.raises(FormatError):
        cl.parse_schema("x | continuous")
    with pytest.raises(ConfigError):
        cl.parse_schema("x | categorical |  | personal")
    with pytest.raises(ConfigError):
        cl.PAPER_SCHEMA.select("genomics")


SMALL = cl.parse_schema("""
age | continuous | | personal
grade | categorical | A;B;C | medical
""")


def test_preprocessing_examples():
    stats = cl.fit_preprocessor([{"age": 1.0, "grade": "A"}, {"age": 2.0, "grade": "B"},
                                 {"age": 3.0, "grade": "B"}], SMALL)
    v = cl.apply(stats, {"age": 2.0, "grade": "B"})
    assert list(v.values) == [0.0, 0.0, 1.0, 0.0]
    assert v.provenance == {}
    v = cl.apply(stats, {"age": None, "grade": "Z"})
    assert list(v.values) == [0.0, 0.0, 1.0, 0.0]
    assert v.provenance == {"age": "missing", "grade": "unseen"}


def test_missing_continuous_imputes_train_mean():
    stats = cl.fit_preprocessor([{"age": 1.0}, {"age": 4.0}], SMALL)
    assert stats.means["age"] == 2.5
    assert cl.apply(stats, {"age": None}).values[0] == 0.0
    # every grade missing: mode falls back to the first level
    assert list(cl.apply(stats, {}).values[1:]) == [1.0, 0.0, 0.0]


def test_constant_column_maps_to_zero():
    stats = cl.fit_preprocessor([{"age": 5.0}, {"age": 5.0}], SMALL)
    assert cl.apply(stats, {"age": 9.0}).values[0] == 0.0
    with pytest.raises(ValueError):
        cl.fit_preprocessor([], SMALL)


def test_transform_width_on_cohort(small_cohort):
    records = [p.clinical for p in small_cohort.patients]
    stats = cl.fit_preprocessor(records[:16], small_cohort.schema)
    X = cl.transform(stats, records[16:])
    assert X.shape == (8, 69)
    assert np.all(np.isfinite(X))


def _logistic_data(rng, n=200, p=4):
    X = rng.normal(size=(n, p))
    y = (X @ rng.normal(size=p) + rng.normal(size=n) > 0).astype(float)
    return X, y


def test_logistic_matches_sklearn(rng):
    X, y = _logistic_data(rng)
    lam = 0.05
    model = cl.fit_logistic_l2(X, y, lam)
    # sklearn minimizes 0.5|w|^2 + C * sum(loss), so C = 1 / (n * lam)
    ref = LogisticRegression(C=1.0 / (len(y) * lam), tol=1e-12, max_iter=10_000).fit(X, y)
    np.testing.assert_allclose(model.w, ref.coef_[0], atol=1e-5)
    assert model.b == pytest.approx(ref.intercept_[0], abs=1e-5)


def test_logistic_gradient_vanishes_at_optimum(rng):
    X, y = _logistic_data(rng)
    model = cl.fit_logistic_l2(X, y, 1e-2)
    _, gw, gb = cl.logistic_objective(model.w, model.b, X, y, 1e-2)
    assert model.converged
    assert np.linalg.norm(np.append(gw, gb)) < 1e-6


def test_logistic_heavy_shrinkage_predicts_prevalence(rng):
    X, y = _logistic_data(rng)
    model = cl.fit_logistic_l2(X, y, 1e6)
    assert np.abs(model.w).max() < 1e-4
    np.testing.assert_allclose(model.predict_proba(X), y.mean(), atol=1e-4)


def test_logistic_separable_and_non_convergence():
    X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0, 0, 1, 1])
    assert auc(cl.fit_logistic_l2(X, y, 1e-3).predict_proba(X), y) == 1.0
    with pytest.warns(RuntimeWarning):
        assert not cl.fit_logistic_l2(X, y, 1e-8, max_iter=2).converged
    with pytest.raises(ValueError):
        cl.fit_logistic_l2(np.array([[np.nan]]), [1])


def _xor(rng, n=400):
    X = rng.uniform(-1, 1, size=(n, 2))
    return X, (X[:, 0] * X[:, 1] > 0).astype(int)


def test_random_forest_fits_xor_and_is_seeded(rng):
    X, y = _xor(rng)
    model = cl.fit_random_forest(X, y, cl.ForestConfig(n_trees=100, seed=1))
    assert auc(model.predict_proba(X), y) > 0.95
    again = cl.fit_random_forest(X, y, cl.ForestConfig(n_trees=100, seed=1))
    assert np.array_equal(model.predict_proba(X), again.predict_proba(X))


def test_single_class_gives_constant_with_warning(rng):
    X = rng.normal(size=(10, 3))
    for fit in (cl.fit_random_forest, cl.fit_mlp):
        with pytest.warns(RuntimeWarning):
            m = fit(X, np.ones(10))
        assert np.all(m.predict_proba(X) == 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_gradients(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 5))
    y = rng.integers(0, 2, size=12).astype(float)
    params = cl.init_mlp(5, cl.MLPConfig(hidden=4, seed=seed))
    params = {k: v + rng.normal(0, 0.3, v.shape) for k, v in params.items()}
    _, g = cl.mlp_loss(params, X, y, 0.1, with_grad=True)
    err = gradcheck(lambda: cl.mlp_loss(params, X, y, 0.1), g, params, max_entries=None)
    assert err < 1e-4


def test_mlp_config_and_separable_fit(rng):
    with pytest.raises(ConfigError):
        cl.MLPConfig(hidden=0)
    X = rng.normal(size=(100, 2))
    y = (X[:, 0] > 0).astype(int)
    assert auc(cl.fit_mlp(X, y).predict_proba(X), y) > 0.999


def test_fit_tabular_dispatch(rng):
    X, y = _logistic_data(rng, n=60)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for kind in cl.TABULAR_MODELS:
            p = cl.fit_tabular(kind, X, y).predict_proba(X)
            assert p.shape == (60,) and np.all((p >= 0) & (p <= 1))
    with pytest.raises(ConfigError):
        cl.fit_tabular("svm", X, y)

import numpy as np
import pytest

from crcrisk import pipelines as pl
from crcrisk.errors import ConfigError
from crcrisk.evalstat import ExperimentConfig, run_experiment
from helpers import TINY_MODEL


def test_parse_names():
    s = pl.parse_pipeline("colonoscopy+wsi+clinical")
    assert s.modalities == ("colonoscopy", "wsi", "clinical") and s.uses_wsi
    assert s.tabular == ("colonoscopy", "clinical")
    s = pl.parse_pipeline("wsi+clinical:fusion=decision_average,wsi=guided-full,model=rf")
    assert (s.fusion, s.wsi_mode, s.model) == ("decision_average", "guided-full", "rf")
    assert pl.parse_pipeline("wsi-guided-freeze").wsi_mode == "guided-freeze"
    assert pl.parse_pipeline("clinical", {"model": "mlp"}).model == "mlp"


@pytest.mark.parametrize("name", ["", "wsi+genome", "wsi+wsi", "wsi:colour=red", "wsi:wsi=half",
                                  "clinical:model=svm", "wsi+clinical:fusion=late", "wsi:target=colour"])
def test_parse_errors(name):
    with pytest.raises(ConfigError):
        pl.parse_pipeline(name)


def test_unknown_token_lists_valid_ones():
    with pytest.raises(ConfigError, match="colonoscopy"):
        pl.parse_pipeline("xray")


def test_shapley_groups_layout(small_cohort):
    schema = small_cohort.schema.select("clinical")
    groups = pl.shapley_groups(pl.parse_pipeline("wsi+clinical"), schema)
    assert groups["WSI risk score"] == [schema.width]
    groups = pl.shapley_groups(pl.parse_pipeline("wsi+clinical:fusion=feature_level"), schema, embed_dim=4)
    assert groups["WSI features"] == [0, 1, 2, 3]
    assert min(min(g) for k, g in groups.items() if k != "WSI features") == 4
    cols = sorted(c for g in groups.values() for c in g)
    assert cols == list(range(4 + schema.width))


@pytest.fixture(scope="module")
def context(tiny_setup):
    cohort, bank, cfg = tiny_setup
    return pl.ExperimentContext(cohort, TINY_MODEL, cfg, cv_folds=3, bank=bank)


@pytest.mark.parametrize("name", ["clinical", "wsi", "wsi-guided-full", "wsi+clinical",
                                  "wsi+colonoscopy:fusion=wsi_decision_feature",
                                  "wsi+clinical:fusion=feature_level"])
def test_pipelines_produce_probabilities(context, name):
    train = np.arange(18)
    test = np.arange(18, 24)
    out = pl.make_pipeline(name, context)(train, test, 0)
    assert out.test_scores.shape == (6,)
    assert np.all((out.test_scores >= 0) & (out.test_scores <= 1))
    assert out.train_scores.shape == (18,)
    model = out.extra.get("model")
    if model is not None:
        np.testing.assert_allclose(model.predict_proba(out.extra["X_test"]), out.test_scores, atol=1e-12)


def test_fixed_weight_and_average(context):
    train, test = np.arange(18), np.arange(18, 24)
    one = pl.make_pipeline("wsi+clinical", context, weight=1.0)(train, test, 0)
    wsi = pl.make_pipeline("wsi", context)(train, test, 0)
    assert np.array_equal(one.test_scores, wsi.test_scores)
    avg = pl.make_pipeline("wsi+clinical:fusion=decision_average", context)(train, test, 0)
    assert avg.extra["weight"] == 0.5


def test_two_pipelines_give_a_pvalue(context):
    rep = run_experiment(ExperimentConfig(n_repeats=2, seed=1), context.labels,
                         {"clinical": pl.make_pipeline("clinical", context),
                          "colonoscopy": pl.make_pipeline("colonoscopy", context)})
    t, p = rep.pvalues[("clinical", "colonoscopy")]
    assert 0.0 <= p <= 1.0

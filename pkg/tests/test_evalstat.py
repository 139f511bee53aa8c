import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from crcrisk import evalstat as ev
from crcrisk.errors import ConfigError, UndefinedMetricError
from oracles import brute_force_auc


def test_auc_worked_example():
    assert ev.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_edge_cases():
    assert ev.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert ev.auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        ev.auc([0.2, 0.4], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_matches_pairwise_count(pairs):
    scores = [s / 5 for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    assert ev.auc(scores, labels) == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)


def test_auc_invariant_under_monotone_transform(rng):
    s = rng.normal(size=50)
    y = rng.integers(0, 2, size=50)
    y[:2] = [0, 1]
    assert ev.auc(s, y) == ev.auc(np.exp(3 * s) + 1, y)


def test_classification_metrics_hand_case():
    scores = np.r_[[0.9] * 2, [0.8] * 6, [0.1], [0.2] * 11]
    labels = np.r_[[1] * 2, [0] * 6, [1], [0] * 11]
    m = ev.classification_metrics(scores, labels, 0.5)
    assert m["precision"] == 0.25
    assert m["recall"] == pytest.approx(2 / 3)
    assert m["f1"] == pytest.approx(0.3636, abs=1e-4)
    assert m["accuracy"] == pytest.approx(13 / 20)


def test_classification_metric_conventions():
    m = ev.classification_metrics([0.1, 0.2], [1, 0], 0.5)
    assert (m["precision"], m["recall"], m["f1"]) == (0.0, 0.0, 0.0)
    m = ev.classification_metrics([0.9, 0.1], [1, 0], 0.5)
    assert all(v == 1.0 for v in m.values())
    assert ev.classification_metrics([0.5], [1], 0.5)["recall"] == 1.0  # score == threshold is positive
    with pytest.raises(ValueError):
        ev.classification_metrics([0.5], [1], 1.5)


def test_paired_ttest_matches_hand_formula():
    d = np.array([0.01, 0.02, 0.015, 0.025, 0.02])
    t, p = ev.paired_ttest(d, np.zeros(5))
    t_hand = d.mean() / (d.std(ddof=1) / math.sqrt(5))
    assert t == pytest.approx(t_hand, rel=1e-12)
    assert p == pytest.approx(2 * scipy.stats.t.sf(t_hand, 4), abs=1e-10)


def test_paired_ttest_conventions():
    assert ev.paired_ttest([0.7, 0.8], [0.7, 0.8]) == (0.0, 1.0)
    t, p = ev.paired_ttest([1.5, 2.5, 3.5], [1.0, 2.0, 3.0])
    assert p == 0.0 and t > 0
    assert ev.format_p(p) == "<1e-12"
    with pytest.raises(ValueError):
        ev.paired_ttest([1, 2], [1])


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 60.0), st.integers(1, 300))
def test_t_pvalue_against_scipy(t, df):
    assert ev.t_two_sided_p(t, df) == pytest.approx(2 * scipy.stats.t.sf(t, df), abs=1e-9)


def test_split_stratified_and_disjoint():
    labels = np.array([1] * 399 + [0] * 1994)
    train, test = ev.split_indices(labels, 0.25, 0)
    assert abs(len(test) - 600) <= 2
    assert not set(train) & set(test)
    assert len(train) + len(test) == len(labels)
    expected = 0.25 * labels.sum()
    assert abs(labels[test].sum() - expected) <= 1
    t2 = ev.split_indices(labels, 0.25, 0)[1]
    assert np.array_equal(test, t2)
    with pytest.raises(ConfigError):
        ev.split_indices([0, 1, 0], 0.25, 0)


@pytest.mark.parametrize("n,k", [(23, 5), (10, 10), (7, 2)])
def test_kfold_partition(n, k):
    labels = np.arange(n) % 3 == 0
    folds = ev.kfold(labels.astype(int), k, 1)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    assert sorted(np.concatenate(folds)) == list(range(n))
    if k == n:
        assert sizes == [1] * n
    with pytest.raises(ConfigError):
        ev.kfold(labels, n + 1, 0)


def test_max_f1_threshold():
    assert ev.max_f1_threshold([0.1, 0.9, 0.8, 0.3], [0, 1, 1, 0]) == 0.8
    assert ev.max_f1_threshold([0.1, 0.2], [0, 0]) == 0.5


def _const_pipeline(scores):
    return lambda train, test, r: ev.PipelineOutput(scores[test], scores[train])


def test_run_experiment_shape_and_identical_pipelines(rng):
    labels = rng.integers(0, 2, size=80)
    scores = np.clip(labels * 0.3 + rng.uniform(size=80) * 0.7, 0, 1)
    cfg = ev.ExperimentConfig(n_repeats=10, seed=3)
    rep = ev.run_experiment(cfg, labels, {"a": _const_pipeline(scores), "b": _const_pipeline(scores)})
    assert len(rep.rows) == 20
    assert rep.pvalues[("a", "b")] == (0.0, 1.0)
    mean, sd = rep.summary()["a"]["auc"]
    assert 0 <= mean <= 1 and sd >= 0
    text = rep.to_csv()
    assert text.splitlines()[0] == "pipeline,repeat,threshold,auc,accuracy,f1,precision,recall"


def test_run_experiment_reports_failing_repeat(rng):
    labels = rng.integers(0, 2, size=40)

    def bad(train, test, r):
        if r == 2:
            raise RuntimeError("boom")
        return ev.PipelineOutput(rng.uniform(size=len(test)))

    with pytest.raises(RuntimeError, match="repeat 2"):
        ev.run_experiment(ev.ExperimentConfig(n_repeats=4), labels, {"bad": bad})


def test_report_files_are_deterministic(tmp_path, rng):
    labels = rng.integers(0, 2, size=60)
    scores = rng.uniform(size=60)
    cfg = ev.ExperimentConfig(n_repeats=3)
    for d in ("x", "y"):
        ev.run_experiment(cfg, labels, {"p": _const_pipeline(scores)}).write(tmp_path / d)
    for name in ("report.csv", "pvalues.csv", "summary.txt"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()

import numpy as np
import pytest

from crcrisk import interpret as it
from crcrisk import maskhit as mh
from crcrisk import training as tr
from crcrisk.errors import ConfigError, NoTissueError
from crcrisk.tiling import Slide
from helpers import TINY_MODEL
from oracles import brute_force_shapley


class Linear:
    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = b

    def predict_proba(self, X):
        return np.atleast_2d(X) @ self.w + self.b


def _nonlinear(rng, p):
    W = rng.normal(size=(p, 3))
    return lambda X: np.tanh(np.atleast_2d(X) @ W).sum(axis=1) + np.atleast_2d(X)[:, 0] ** 2


def test_linear_closed_form_exact():
    # dyadic values keep every floating-point step exact
    model = Linear([2.0, -0.5, 0.25])
    bg = np.array([[0.0, 1.0, 2.0], [1.0, 3.0, 2.0]])
    x = np.array([3.5, 0.0, 4.0])
    res = it.shapley(model, x, bg, {"a": [0], "b": [1], "c": [2]})
    mean = bg.mean(axis=0)
    assert list(res.values) == list(model.w * (x - mean))


def test_matches_brute_force_permutations(rng):
    f = _nonlinear(rng, 6)
    bg = rng.normal(size=(30, 6))
    x = rng.normal(size=6)
    groups = {"a": [0, 1], "b": [2], "c": [3, 4], "d": [5]}
    res = it.shapley(f, x, bg, groups)
    np.testing.assert_allclose(res.values, brute_force_shapley(f, x, bg.mean(axis=0), groups), atol=1e-12)


def test_axioms(rng):
    W = rng.normal(size=(8, 4))
    W[6:] = 0.0  # the last group is a dummy
    W[2:4] = W[0:2]  # groups 0 and 1 are interchangeable
    f = lambda X: np.tanh(np.atleast_2d(X) @ W).sum(axis=1)
    groups = {"g0": [0, 1], "g1": [2, 3], "g2": [4, 5], "dummy": [6, 7]}
    bg = rng.normal(size=(20, 8))
    bg[:, 2:4] = bg[:, 0:2]
    x = rng.normal(size=8)
    x[2:4] = x[0:2]
    res = it.shapley(f, x, bg, groups)
    assert abs(res.values.sum() - (res.full - res.base)) < 1e-6
    assert abs(res.values[0] - res.values[1]) < 1e-9
    assert res.values[3] == 0.0


def test_instance_at_background_mean_gives_zero(rng):
    bg = rng.normal(size=(10, 4))
    res = it.shapley(_nonlinear(rng, 4), bg.mean(axis=0), bg, {"a": [0, 1], "b": [2], "c": [3]})
    assert np.all(np.abs(res.values) < 1e-15)


def test_monte_carlo_within_three_standard_errors(rng):
    f = _nonlinear(rng, 6)
    bg = rng.normal(size=(30, 6))
    x = rng.normal(size=6)
    groups = {str(i): [i] for i in range(6)}
    exact = it.shapley(f, x, bg, groups)
    mc = it.shapley(f, x, bg, groups, n_permutations=3000, rng=rng, exact_limit=0)
    assert not mc.exact
    assert np.all(np.abs(mc.values - exact.values) <= 3 * mc.se + 1e-12)
    assert mc.values.sum() == pytest.approx(mc.full - mc.base, abs=1e-9)


def test_errors(rng):
    with pytest.raises(ValueError):
        it.shapley(Linear([1.0]), np.ones(1), np.zeros((0, 1)), {"a": [0]})
    with pytest.raises(ConfigError):
        it.shapley(Linear([1.0, 1.0]), np.ones(2), np.zeros((3, 2)), {"a": [0]})


def test_aggregate_shapley():
    one = {"a": 0.1, "b": -0.3, "c": 0.2}
    rep = it.aggregate_shapley([one])
    assert rep.names == ["b", "c", "a"]
    assert np.all(rep.std == 0)
    rep2 = it.aggregate_shapley([one, one])
    np.testing.assert_array_equal(rep2.mean, rep.mean)
    assert np.all(rep2.std == 0)
    with pytest.raises(ConfigError):
        it.aggregate_shapley([one, {"a": 1.0}])
    text = rep.to_csv().splitlines()
    assert text[0] == "group,mean,std,rank" and text[1].startswith("b,")


def test_permutation_importance_flags_used_group(rng):
    X = rng.normal(size=(200, 3))
    y = (X[:, 0] > 0).astype(int)
    imp = it.permutation_importance(Linear([1.0, 0.0, 0.0]), X, y, {"a": [0], "b": [1], "c": [2]}, rng)
    assert imp["a"] > 0.3 and imp["b"] == 0.0 and imp["c"] == 0.0
    rep = it.aggregate_shapley([{"a": 1.0, "b": 0.0, "c": 0.0}], [imp])
    assert rep.perm_mean[0] == imp["a"]


# ----------------------------------------------------------------------------
# attention


@pytest.fixture(scope="module")
def attention_setup(tiny_setup):
    cohort, bank, _ = tiny_setup
    ck = mh.Checkpoint(mh.init_params(TINY_MODEL, 0), 0, "pretrained")
    other = mh.Checkpoint(mh.init_params(TINY_MODEL, 1), 0, "risk")
    for k in other.params.tensors:
        other.params.tensors[k] = other.params.tensors[k] * 3
    return cohort.patients[0].slides[0], bank, ck, other


def test_saturated_class_token_falls_back_to_uniform(attention_setup):
    slide, bank, ck, _ = attention_setup
    hot = mh.Checkpoint(ck.params.copy(), 0, "risk")
    for k in hot.params.tensors:
        hot.params.tensors[k] = hot.params.tensors[k] * 50
    diff = it.attention_difference(ck, hot, slide, bank)
    assert np.all(np.isfinite(diff.values))
    assert np.all(np.abs(diff.region_sums()) < 1e-6)


def test_attention_map_normalized(attention_setup):
    slide, bank, ck, _ = attention_setup
    amap = it.attention_map(ck, slide, bank)
    assert amap.values.max() == 1.0
    assert np.all(amap.values >= 0)
    assert len(amap.values) == len(bank.slide(slide)[0])


def test_attention_difference_properties(attention_setup):
    slide, bank, ck, other = attention_setup
    same = it.attention_difference(ck, ck, slide, bank)
    assert np.all(same.values == 0.0)
    diff = it.attention_difference(ck, other, slide, bank)
    assert np.any(diff.values != 0)
    assert np.all(np.abs(diff.region_sums()) < 1e-6)


def test_attention_difference_rejects_mismatch(attention_setup):
    slide, bank, ck, _ = attention_setup
    wider = mh.Checkpoint(mh.init_params(mh.TransformerConfig(**{**TINY_MODEL.to_dict(), "mlp_dim": 8}), 0), 0, "risk")
    with pytest.raises(ConfigError):
        it.attention_difference(ck, wider, slide, bank)
    reseeded = mh.Checkpoint(ck.params, 9, "risk")
    with pytest.raises(ConfigError):
        it.attention_difference(ck, reseeded, slide, bank)


def test_single_patch_slide_gets_full_attention():
    pixels = np.full((8, 8, 3), 243, np.uint8)
    pixels[:4, :4] = (214, 150, 190)
    slide = Slide("one", pixels)
    bank = tr.SlideBank.for_model(TINY_MODEL, 4, 0)
    amap = it.attention_map(mh.Checkpoint(mh.init_params(TINY_MODEL, 0), 0, "risk"), slide, bank)
    assert list(amap.values) == [1.0]


def test_blank_slide_has_no_tissue():
    slide = Slide("blank", np.full((16, 16, 3), 250, np.uint8))
    bank = tr.SlideBank.for_model(TINY_MODEL, 4, 0)
    with pytest.raises(NoTissueError):
        it.attention_map(mh.Checkpoint(mh.init_params(TINY_MODEL, 0), 0, "risk"), slide, bank)


def test_overlay_zero_map_is_palette_midpoint(attention_setup):
    import matplotlib

    slide, bank, ck, _ = attention_setup
    zero = it.attention_difference(ck, ck, slide, bank)
    arr = it.overlay_array(slide, zero, alpha=1.0)
    mid = np.rint(np.array(matplotlib.colormaps["RdBu_r"](0.5)[:3]) * 255)
    assert arr.shape == slide.pixels.shape
    assert np.all(arr == mid.astype(np.uint8))


def test_overlay_files_deterministic(attention_setup, tmp_path):
    slide, bank, ck, other = attention_setup
    amap = it.attention_difference(ck, other, slide, bank)
    for suffix in ("png", "ppm"):
        a = it.render_overlay(slide, amap, tmp_path / f"a.{suffix}")
        b = it.render_overlay(slide, amap, tmp_path / f"b.{suffix}")
        assert a.read_bytes() == b.read_bytes()
    from PIL import Image

    assert Image.open(tmp_path / "a.png").size == (slide.width, slide.height)

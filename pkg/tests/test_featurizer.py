import numpy as np
import pytest

from crcrisk import featurizer as ft
from crcrisk import tiling as tl
from crcrisk.errors import FormatError, ShapeError


def _slide(rng, h=32, w=32):
    return tl.Slide("s", rng.integers(0, 200, size=(h, w, 3), dtype=np.uint8))


def _region(slide, patch_px=8, side=4):
    grid = tl.tile(slide, patch_px, tl.tissue_mask(slide, patch_px, brightness_threshold=1.0, min_tissue_fraction=0.0))
    return tl.cover_regions(grid, side)[0]


def test_zero_patch_gives_bias():
    cfg = ft.ExtractorConfig()
    ex = ft.ConvExtractor(cfg)
    out = ex(np.zeros((2, 8, 8, 3), np.uint8))
    assert np.array_equal(out[0], ex.bias) and np.array_equal(out[1], ex.bias)
    assert np.array_equal(ft.ConvExtractor(cfg)(np.zeros((1, 8, 8, 3), np.uint8))[0], ex.bias)


def test_width_and_determinism(rng):
    slide = _slide(rng)
    region = _region(slide)
    cfg = ft.ExtractorConfig(feat_dim=32, seed=4)
    a = ft.extract(region, slide, cfg)
    b = ft.extract(region, slide, cfg)
    assert a.d == 32 and a.matrix.shape[0] == len(region)
    assert np.array_equal(a.matrix, b.matrix)
    assert np.all(np.isfinite(a.matrix))
    assert not np.array_equal(a.matrix, ft.extract(region, slide, ft.ExtractorConfig(seed=5)).matrix)


def test_duplicated_patch_gives_identical_rows(rng):
    px = np.zeros((8, 16, 3), np.uint8)
    patch = rng.integers(0, 255, size=(8, 8, 3), dtype=np.uint8)
    px[:, :8] = patch
    px[:, 8:] = patch
    slide = tl.Slide("d", px)
    region = _region(slide, side=2)
    m = ft.extract(region, slide, ft.ExtractorConfig()).matrix
    assert np.array_equal(m[0], m[1])


def test_patch_size_mismatch(rng):
    slide = _slide(rng)
    with pytest.raises(ShapeError):
        ft.extract(_region(slide), slide, ft.ExtractorConfig(patch_px=16))
    with pytest.raises(ShapeError):
        ft.ExtractorConfig(patch_px=2)


def test_translation_by_one_patch_permutes_rows(rng):
    base = rng.integers(0, 200, size=(32, 32, 3), dtype=np.uint8)
    shifted = np.zeros_like(base)
    shifted[:, 8:] = base[:, :-8]
    ex = ft.ConvExtractor(ft.ExtractorConfig())
    all_cells = tl.PatchGrid(np.argwhere(np.ones((4, 4), bool)), 8, (4, 4))
    a = ft.slide_feature_table(tl.Slide("a", base), all_cells, ex)
    b = ft.slide_feature_table(tl.Slide("b", shifted), all_cells, ex)
    np.testing.assert_array_equal(b[:, 1:], a[:, :-1])


def test_feature_table_layout(rng):
    slide = _slide(rng)
    grid = tl.PatchGrid(np.array([[0, 1], [3, 2]]), 8, (4, 4))
    ex = ft.ConvExtractor(ft.ExtractorConfig(feat_dim=5))
    table = ft.slide_feature_table(slide, grid, ex)
    assert table.shape == (4, 4, 5)
    np.testing.assert_allclose(table[3, 2], ex(ft.patch_pixels(slide, [[3, 2]], 8))[0], rtol=0, atol=1e-12)
    assert np.all(table[0, 0] == 0)


def test_feature_cache_round_trip(rng, tmp_path):
    slide = _slide(rng)
    region = _region(slide)
    cfg = ft.ExtractorConfig(seed=2)
    cache = ft.FeatureCache(tmp_path)
    first = cache.extract(region, slide, cfg)
    path = cache.path(slide.id, region.origin, 2)
    assert path.exists()
    assert np.array_equal(cache.get(slide.id, region.origin, 2), first.matrix)
    assert cache.get(slide.id, region.origin, 3) is None
    path.write_bytes(b"JUNK" + path.read_bytes()[4:])
    with pytest.raises(FormatError):
        cache.get(slide.id, region.origin, 2)


def test_out_of_bounds_coords(rng):
    with pytest.raises(ShapeError):
        ft.patch_pixels(_slide(rng), [[4, 0]], 8)

"""Attention maps, attention differences, overlays and Shapley attributions."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import maskhit as mh
from .errors import ConfigError, NoTissueError, ShapeError
from .evalstat import auc

EXACT_LIMIT = 15


# ----------------------------------------------------------------------------
# attention


@dataclass
class AttentionMap:
    """Per tissue patch values, aligned with ``grid.coords``."""

    values: np.ndarray
    grid: object
    region_of: np.ndarray  # index of the cover region holding each patch
    tag: str = ""
    normalized: bool = False

    def raster(self, fill=np.nan):
        out = np.full(self.grid.shape, fill, dtype=np.float64)
        out[self.grid.coords[:, 0], self.grid.coords[:, 1]] = self.values
        return out

    def region_sums(self):
        return np.bincount(self.region_of, weights=self.values)


def _raw_attention(ckpt: mh.Checkpoint, slide, bank):
    grid, table, regions = bank.slide(slide)
    if len(grid) == 0:
        raise NoTissueError(f"slide {slide.id} has no tissue patches")
    feats, pos = zip(*(bank.region_arrays(table, r) for r in regions))
    batch = mh.RegionBatch.from_regions(list(feats), list(pos))
    _, attn = mh.forward_region(ckpt.params, batch)
    att = mh.class_token_attention(attn, batch.present)
    values = np.zeros(len(grid))
    region_of = np.zeros(len(grid), dtype=np.int64)
    for b, r in enumerate(regions):
        values[r.slots] = att[b, :len(r)]
        region_of[r.slots] = b
    return grid, values, region_of


def attention_map(ckpt: mh.Checkpoint, slide, bank) -> AttentionMap:
    """Class-token attention over the exhaustive region cover, max-normalized per slide."""
    grid, values, region_of = _raw_attention(ckpt, slide, bank)
    peak = values.max()
    if peak > 0:
        values = values / peak
    return AttentionMap(values, grid, region_of, ckpt.stage, True)


def _check_compatible(a: mh.Checkpoint, b: mh.Checkpoint):
    if a.params.config != b.params.config:
        raise ConfigError("checkpoints have different transformer configurations")
    if a.featurizer_seed != b.featurizer_seed:
        raise ConfigError("checkpoints were trained with different featurizer seeds")


def attention_difference(pretrained: mh.Checkpoint, finetuned: mh.Checkpoint, slide, bank) -> AttentionMap:
    """Raw fine-tuned minus pretrained attention on the same region cover."""
    _check_compatible(pretrained, finetuned)
    grid, before, region_of = _raw_attention(pretrained, slide, bank)
    _, after, _ = _raw_attention(finetuned, slide, bank)
    return AttentionMap(after - before, grid, region_of, f"{finetuned.stage}-{pretrained.stage}", False)


def overlay_array(slide, amap: AttentionMap, palette="RdBu_r", alpha=0.5):
    """Slide pixels blended with a per-patch color; values are scaled by max |v|
    onto the palette so that 0 is its midpoint."""
    import matplotlib

    if amap.grid.shape != (slide.height // amap.grid.patch_px, slide.width // amap.grid.patch_px):
        raise ShapeError("attention map does not match the slide tiling")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    r = amap.raster(fill=0.0)
    scale = np.abs(r).max()
    u = 0.5 + 0.5 * (r / scale if scale > 0 else r)
    rgb = matplotlib.colormaps[palette](u)[..., :3] * 255.0
    p = amap.grid.patch_px
    colors = np.repeat(np.repeat(rgb, p, axis=0), p, axis=1)
    out = slide.pixels.astype(np.float64)
    h, w = colors.shape[:2]
    out[:h, :w] = (1 - alpha) * out[:h, :w] + alpha * colors
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def render_overlay(slide, amap: AttentionMap, out_path, palette="RdBu_r", alpha=0.5):
    """Write the overlay as PNG or PPM (chosen by suffix); returns the path."""
    arr = overlay_array(slide, amap, palette, alpha)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "PPM" if out_path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(arr).save(out_path, format=fmt)
    return out_path


def write_attention_csv(amap: AttentionMap, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "region", "value"])
        for (rr, cc), reg, v in zip(amap.grid.coords, amap.region_of, amap.values):
            w.writerow([int(rr), int(cc), int(reg), repr(float(v))])


# ----------------------------------------------------------------------------
# Shapley values


@dataclass
class ShapleyValues:
    names: list
    values: np.ndarray
    base: float  # f(background mean)
    full: float  # f(instance)
    se: np.ndarray = None  # Monte-Carlo standard errors; None when exact

    @property
    def exact(self):
        return self.se is None


def _predict(model):
    return model.predict_proba if hasattr(model, "predict_proba") else model


def _check_groups(groups, width):
    cols = sorted(c for g in groups.values() for c in g)
    if cols != list(range(width)):
        raise ConfigError("feature groups must partition the input columns")


def _coalition_rows(x, mean, groups, masks):
    names = list(groups)
    Z = np.tile(mean, (len(masks), 1))
    for j, name in enumerate(names):
        on = (masks >> j) & 1 == 1
        cols = groups[name]
        Z[np.ix_(on, cols)] = x[cols]
    return Z


def shapley(model, instance, background, groups, n_permutations=1000, rng=None, exact_limit=EXACT_LIMIT):
    """Group Shapley values; out-of-coalition groups take the background means.

    Exact enumeration up to ``exact_limit`` groups, permutation sampling above.
    """
    f = _predict(model)
    x = np.asarray(instance, dtype=np.float64).ravel()
    bg = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if bg.shape[0] == 0:
        raise ValueError("background set is empty")
    if bg.shape[1] != x.size:
        raise ShapeError("background and instance widths differ")
    _check_groups(groups, x.size)
    mean = bg.mean(axis=0)
    names = list(groups)
    G = len(names)
    if G <= exact_limit:
        masks = np.arange(2 ** G, dtype=np.int64)
        v = np.asarray(f(_coalition_rows(x, mean, groups, masks)), dtype=np.float64)
        sizes = np.array([bin(m).count("1") for m in masks])
        weight = np.array([math.factorial(s) * math.factorial(G - s - 1) / math.factorial(G) if s < G else 0.0
                           for s in range(G + 1)])
        phi = np.zeros(G)
        for j in range(G):
            without = masks[(masks >> j) & 1 == 0]
            phi[j] = np.sum(weight[sizes[without]] * (v[without | (1 << j)] - v[without]))
        return ShapleyValues(names, phi, float(v[0]), float(v[-1]))

    if G > 62:
        raise ConfigError("at most 62 feature groups are supported")
    rng = rng if rng is not None else np.random.default_rng(0)
    perms = np.stack([rng.permutation(G) for _ in range(n_permutations)])
    # coalition k of a permutation holds its first k groups
    bits = np.left_shift(np.int64(1), perms.astype(np.int64))
    masks = np.concatenate([np.zeros((n_permutations, 1), np.int64), np.cumsum(bits, axis=1)], axis=1)
    Z = _coalition_rows(x, mean, groups, masks.ravel())
    v = np.asarray(f(Z), dtype=np.float64).reshape(n_permutations, G + 1)
    samples = np.zeros((n_permutations, G))
    rows = np.arange(n_permutations)[:, None]
    samples[rows, perms] = np.diff(v, axis=1)
    se = samples.std(axis=0, ddof=1) / math.sqrt(n_permutations)
    full = float(f(x[None, :])[0])
    base = float(f(mean[None, :])[0])
    return ShapleyValues(names, samples.mean(axis=0), base, full, se)


def mean_abs_shapley(model, X, background, groups, max_instances=None, rng=None, **kw):
    """Per-group mean |Shapley value| over the rows of X (one report per repeat)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if max_instances is not None and len(X) > max_instances:
        X = X[:max_instances]
    rng = rng if rng is not None else np.random.default_rng(0)
    vals = np.stack([shapley(model, x, background, groups, rng=rng, **kw).values for x in X])
    return dict(zip(groups, np.abs(vals).mean(axis=0)))


def permutation_importance(model, X, y, groups, rng, n_shuffles=5):
    """AUC drop when one group's columns are shuffled jointly across rows."""
    f = _predict(model)
    X = np.asarray(X, dtype=np.float64)
    ref = auc(f(X), y)
    out = {}
    for name, cols in groups.items():
        drops = []
        for _ in range(n_shuffles):
            Xp = X.copy()
            Xp[:, cols] = X[rng.permutation(len(X))][:, cols]
            drops.append(ref - auc(f(Xp), y))
        out[name] = float(np.mean(drops))
    return out


@dataclass
class ShapleyReport:
    names: list  # sorted by |mean| descending
    mean: np.ndarray
    std: np.ndarray
    perm_mean: np.ndarray = None
    perm_std: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def top(self, k=10):
        return self.names[:k], self.mean[:k], self.std[:k]

    def rank(self, name):
        return self.names.index(name) + 1

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["group", "mean", "std", "rank"]
        if self.perm_mean is not None:
            head += ["perm_auc_drop_mean", "perm_auc_drop_std"]
        w.writerow(head)
        for i, name in enumerate(self.names):
            row = [name, f"{self.mean[i]:.8g}", f"{self.std[i]:.8g}", i + 1]
            if self.perm_mean is not None:
                row += [f"{self.perm_mean[i]:.8g}", f"{self.perm_std[i]:.8g}"]
            w.writerow(row)
        return buf.getvalue()


def _mean_std(rows):
    arr = np.asarray(rows, dtype=np.float64)
    return arr.mean(axis=0), (arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros(arr.shape[1]))


def aggregate_shapley(reports, importances=None) -> ShapleyReport:
    """Mean/std per group across repeats, ordered by |mean| (ties by name).

    ``reports`` are dicts group -> value (or ShapleyValues); ``importances`` are
    optional per-repeat permutation-importance dicts over the same groups.
    """
    if not reports:
        raise ValueError("need at least one Shapley report")
    dicts = [dict(zip(r.names, r.values)) if isinstance(r, ShapleyValues) else dict(r) for r in reports]
    names = list(dicts[0])
    if any(set(d) != set(names) for d in dicts):
        raise ConfigError("Shapley reports use different groupings")
    mean, std = _mean_std([[d[n] for n in names] for d in dicts])
    order = sorted(range(len(names)), key=lambda i: (-abs(mean[i]), names[i]))
    rep = ShapleyReport([names[i] for i in order], mean[order], std[order])
    if importances:
        if any(set(d) != set(names) for d in importances):
            raise ConfigError("permutation importances use a different grouping")
        pm, ps = _mean_std([[d[n] for n in names] for d in importances])
        rep.perm_mean, rep.perm_std = pm[order], ps[order]
    return rep

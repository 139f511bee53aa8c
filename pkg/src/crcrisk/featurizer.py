"""Frozen, seeded patch feature extractor and an optional on-disk feature cache.

The default extractor is a two-stage strided convolution (2x2 kernels, stride
2, ReLU, no conv bias) followed by a spatial average and an affine projection.
Its weights are drawn once from the seed and never trained.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .tiling import PatchGrid, Region, Slide


@dataclass(frozen=True)
class ExtractorConfig:
    patch_px: int = 8
    feat_dim: int = 32
    seed: int = 0
    channels: tuple = (8, 16)

    def __post_init__(self):
        if self.patch_px < 4:
            raise ShapeError("patch_px must be >= 4 for two stride-2 stages")
        if self.feat_dim < 1:
            raise ShapeError("feat_dim must be >= 1")


@dataclass
class PatchFeatures:
    matrix: np.ndarray  # (n_slots, d)

    @property
    def d(self):
        return self.matrix.shape[1]


class ConvExtractor:
    def __init__(self, cfg: ExtractorConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c1, c2 = cfg.channels
        self.w1 = rng.normal(0, 1 / math.sqrt(12), (2, 2, 3, c1))
        self.w2 = rng.normal(0, 1 / math.sqrt(4 * c1), (2, 2, c1, c2))
        self.proj = rng.normal(0, 1 / math.sqrt(c2), (c2, cfg.feat_dim))
        self.bias = rng.normal(0, 0.1, cfg.feat_dim)

    @staticmethod
    def _conv(x, w):
        n, h, wd, c = x.shape
        h2, w2 = h // 2, wd // 2
        x = x[:, : 2 * h2, : 2 * w2].reshape(n, h2, 2, w2, 2, c)
        return np.maximum(np.einsum("nhawbc,abco->nhwo", x, w, optimize=True), 0.0)

    def __call__(self, patches):
        """(n, p, p, 3) uint8 patches -> (n, feat_dim) features."""
        patches = np.asarray(patches)
        p = self.cfg.patch_px
        if patches.ndim != 4 or patches.shape[1:] != (p, p, 3):
            raise ShapeError(f"expected (n, {p}, {p}, 3) patches, got {patches.shape}")
        x = patches.astype(np.float64) / 255.0
        x = self._conv(self._conv(x, self.w1), self.w2)
        return x.mean(axis=(1, 2)) @ self.proj + self.bias


def patch_pixels(slide: Slide, coords, patch_px):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    rows, cols = slide.height // patch_px, slide.width // patch_px
    if len(coords) and (coords.min() < 0 or coords[:, 0].max() >= rows or coords[:, 1].max() >= cols):
        raise ShapeError("patch coordinates fall outside the slide")
    px = slide.pixels[: rows * patch_px, : cols * patch_px]
    blocks = px.reshape(rows, patch_px, cols, patch_px, 3).transpose(0, 2, 1, 3, 4)
    return blocks[coords[:, 0], coords[:, 1]]


def extract(region: Region, slide: Slide, extractor_cfg: ExtractorConfig, extractor=None) -> PatchFeatures:
    if region.patch_px != extractor_cfg.patch_px:
        raise ShapeError(f"region patch size {region.patch_px} != extractor patch size {extractor_cfg.patch_px}")
    extractor = extractor or ConvExtractor(extractor_cfg)
    return PatchFeatures(extractor(patch_pixels(slide, region.coords, region.patch_px)))


def slide_feature_table(slide: Slide, grid: PatchGrid, extractor: ConvExtractor):
    """Features of every tissue patch, laid out on the patch lattice (rows, cols, d)."""
    table = np.zeros(grid.shape + (extractor.cfg.feat_dim,))
    if len(grid):
        feats = extractor(patch_pixels(slide, grid.coords, grid.patch_px))
        table[grid.coords[:, 0], grid.coords[:, 1]] = feats
    return table


_CACHE_MAGIC = b"PFC1"


class FeatureCache:
    """Directory of per-region feature matrices keyed by (slide id, origin, seed).

    File layout: magic, then little-endian uint32 rows, uint32 cols, int64 seed,
    followed by row-major float64 values.
    """

    def __init__(self, root):
        self.root = Path(root)

    def path(self, slide_id, origin, seed):
        return self.root / f"{slide_id}__{origin[0]}_{origin[1]}__{seed}.feat"

    def put(self, slide_id, origin, seed, matrix):
        matrix = np.ascontiguousarray(matrix, dtype="<f8")
        self.root.mkdir(parents=True, exist_ok=True)
        header = _CACHE_MAGIC + struct.pack("<IIq", matrix.shape[0], matrix.shape[1], int(seed))
        self.path(slide_id, origin, seed).write_bytes(header + matrix.tobytes())

    def get(self, slide_id, origin, seed):
        p = self.path(slide_id, origin, seed)
        if not p.exists():
            return None
        data = p.read_bytes()
        if data[:4] != _CACHE_MAGIC or len(data) < 20:
            raise FormatError(f"{p}: bad feature cache header")
        rows, cols, file_seed = struct.unpack_from("<IIq", data, 4)
        if file_seed != seed or len(data) != 20 + 8 * rows * cols:
            raise FormatError(f"{p}: feature cache does not match its key")
        return np.frombuffer(data, dtype="<f8", offset=20).reshape(rows, cols).astype(np.float64)

    def extract(self, region, slide, extractor_cfg, extractor=None):
        hit = self.get(slide.id, region.origin, extractor_cfg.seed)
        if hit is not None and hit.shape[0] == len(region):
            return PatchFeatures(hit)
        feats = extract(region, slide, extractor_cfg, extractor)
        self.put(slide.id, region.origin, extractor_cfg.seed, feats.matrix)
        return feats

"""Tissue masking, patch grids and square region sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMaskError, ShapeError

DEFAULT_BRIGHTNESS_THRESHOLD = 0.8
DEFAULT_MIN_TISSUE_FRACTION = 0.1


@dataclass
class Slide:
    id: str
    pixels: np.ndarray  # (height, width, 3) uint8
    blobs: list = field(default_factory=list)  # planted ellipses, synthetic slides only

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Slide):
            return NotImplemented
        return (self.id == other.id and self.pixels.dtype == other.pixels.dtype
                and np.array_equal(self.pixels, other.pixels) and self.blobs == other.blobs)


@dataclass
class TissueMask:
    grid: np.ndarray  # (rows, cols) bool
    patch_px: int

    @property
    def shape(self):
        return self.grid.shape


@dataclass
class PatchGrid:
    coords: np.ndarray  # (n, 2) int (row, col) of tissue patches
    patch_px: int
    shape: tuple  # (rows, cols) of the full patch lattice

    def __len__(self):
        return len(self.coords)

    def occupancy(self):
        occ = np.zeros(self.shape, dtype=bool)
        if len(self.coords):
            occ[self.coords[:, 0], self.coords[:, 1]] = True
        return occ


@dataclass
class Region:
    origin: tuple
    side: int
    slots: np.ndarray  # indices into PatchGrid.coords
    coords: np.ndarray  # (n, 2) absolute patch coords
    positions: np.ndarray  # (n, 2) coords relative to origin
    patch_px: int
    slide_id: str = ""

    def __len__(self):
        return len(self.slots)


def brightness(pixels):
    return np.asarray(pixels, dtype=np.float64).mean(axis=-1) / 255.0


def grid_shape(slide_px, patch_px):
    h, w = slide_px
    return (h // patch_px, w // patch_px)


def tissue_mask(slide, patch_px, brightness_threshold=DEFAULT_BRIGHTNESS_THRESHOLD,
                min_tissue_fraction=DEFAULT_MIN_TISSUE_FRACTION) -> TissueMask:
    """A cell is tissue when at least ``min_tissue_fraction`` of its pixels are
    darker than ``brightness_threshold`` (mean RGB in [0, 1])."""
    if not (0 <= brightness_threshold <= 1 and 0 <= min_tissue_fraction <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    pixels = slide.pixels if isinstance(slide, Slide) else np.asarray(slide)
    rows, cols = grid_shape(pixels.shape[:2], patch_px)
    if rows == 0 or cols == 0:
        raise EmptyMaskError(f"slide {pixels.shape[:2]} is smaller than one {patch_px}px patch")
    dark = brightness(pixels[: rows * patch_px, : cols * patch_px]) < brightness_threshold
    frac = dark.reshape(rows, patch_px, cols, patch_px).mean(axis=(1, 3))
    return TissueMask(frac >= min_tissue_fraction, patch_px)


def tile(slide, patch_px, mask: TissueMask) -> PatchGrid:
    pixels = slide.pixels if isinstance(slide, Slide) else np.asarray(slide)
    expected = grid_shape(pixels.shape[:2], patch_px)
    if mask.shape != expected or mask.patch_px != patch_px:
        raise ShapeError(f"mask shape {mask.shape} does not match slide grid {expected}")
    coords = np.argwhere(mask.grid).astype(np.int64).reshape(-1, 2)
    return PatchGrid(coords, patch_px, expected)


def region_side(max_patches):
    return int(math.ceil(math.sqrt(max_patches)))


def _window_region(grid, origin, side, slide_id=""):
    r0, c0 = origin
    c = grid.coords
    inside = (c[:, 0] >= r0) & (c[:, 0] < r0 + side) & (c[:, 1] >= c0) & (c[:, 1] < c0 + side)
    slots = np.flatnonzero(inside)
    coords = c[slots]
    return Region((int(r0), int(c0)), side, slots, coords, coords - np.array([r0, c0]), grid.patch_px, slide_id)


def candidate_origins(grid: PatchGrid, side):
    """Origins of the side-aligned window lattice that contain at least one tissue patch."""
    if len(grid) == 0:
        return []
    cells = np.unique(grid.coords // side, axis=0)
    return [(int(r) * side, int(c) * side) for r, c in cells]


def cover_regions(grid: PatchGrid, side, slide_id=""):
    """Every non-empty lattice window, row-major: an exhaustive non-overlapping cover."""
    return [_window_region(grid, o, side, slide_id) for o in candidate_origins(grid, side)]


def sample_regions(grid: PatchGrid, k, side, rng, slide_id=""):
    """Up to ``k`` pairwise-disjoint windows drawn uniformly without replacement
    from the lattice windows that hold tissue."""
    if k < 1 or side < 1:
        raise ValueError("k and side must be >= 1")
    origins = candidate_origins(grid, side)
    if not origins:
        return []
    pick = rng.choice(len(origins), size=min(k, len(origins)), replace=False)
    return [_window_region(grid, origins[i], side, slide_id) for i in pick]


def subsample_patches(region: Region, fraction, rng) -> Region:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(region)
    keep = int(math.ceil(fraction * n))
    if keep >= n:
        return region
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return Region(region.origin, region.side, region.slots[idx], region.coords[idx],
                  region.positions[idx], region.patch_px, region.slide_id)


def windows_overlap(a: Region, b: Region):
    (ar, ac), (br, bc) = a.origin, b.origin
    return ar < br + b.side and br < ar + a.side and ac < bc + b.side and bc < ac + a.side

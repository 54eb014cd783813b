"""Procedural top-down scenes: flat-roofed boxes casting hard shadows on flat ground.

Used for desk-scale training and testing where licensed imagery is not
available.  Shadow geometry is exact: a box of height ``h`` under a sun at
elevation ``e`` casts a shadow of horizontal length ``h / tan(e)`` along the
direction opposite the sun azimuth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .datapipe import SYNTHETIC, DatasetMode, PatchCatalog, build_catalog, merge_catalogs, split_catalog
from .errors import GenerationError, InvalidArgument
from .grids import RasterGrid, RgbImage


@dataclass(frozen=True)
class SceneParams:
    world: int = 256
    rgb_gsd: float = 0.25
    ratio: int = 4
    n_buildings: int = 6
    height_range: Tuple[float, float] = (3.0, 30.0)
    footprint_range: Tuple[int, int] = (20, 48)
    sun_azimuth: float = 135.0  # degrees clockwise from north (image up)
    sun_elevation: float = 35.0
    ground_band: Tuple[int, int] = (80, 160)
    roof_band: Tuple[int, int] = (170, 230)
    shadow_band: Tuple[int, int] = (0, 10)
    noise_sigma: float = 2.0
    seed: int = 0
    max_tries: int = 200

    def __post_init__(self):
        if not 0 < self.sun_elevation < 90:
            raise InvalidArgument(f"sun elevation must lie in (0, 90), got {self.sun_elevation}")
        if self.world % self.ratio:
            raise InvalidArgument(f"world {self.world} not divisible by ratio {self.ratio}")
        if self.n_buildings < 0:
            raise InvalidArgument("n_buildings must be >= 0")
        lo, hi = self.footprint_range
        if not 1 <= lo <= hi <= self.world:
            raise InvalidArgument(f"bad footprint_range {self.footprint_range}")


@dataclass
class Building:
    top: int
    left: int
    height_px: int
    width_px: int
    height_m: float


@dataclass
class Scene:
    rgb: RgbImage
    target: RasterGrid  # block-averaged heights at rgb_gsd * ratio
    heights: np.ndarray  # full-resolution height field, metres
    shadow: np.ndarray  # bool, ground pixels covered by a cast shadow
    buildings: List[Building] = field(default_factory=list)


def shadow_length_px(h: float, elevation: float, gsd: float) -> int:
    """Horizontal shadow length of an object of height ``h`` metres, in pixels."""
    if not 0 < elevation < 90:
        raise InvalidArgument(f"sun elevation must lie in (0, 90), got {elevation}")
    return int(round(h / math.tan(math.radians(elevation)) / gsd))


def shadow_direction(azimuth: float) -> Tuple[float, float]:
    """Unit (row, col) step pointing away from the sun; north is -row, east is +col."""
    a = math.radians(azimuth)
    return math.cos(a), -math.sin(a)


def _place(rng, p: SceneParams) -> List[Tuple[int, int, int, int]]:
    rects: List[Tuple[int, int, int, int]] = []
    lo, hi = p.footprint_range
    for _ in range(p.n_buildings):
        for _attempt in range(p.max_tries):
            h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            top = int(rng.integers(0, p.world - h + 1))
            left = int(rng.integers(0, p.world - w + 1))
            if all(
                top + h <= t or t + hh <= top or left + w <= l or l + ww <= left
                for t, l, hh, ww in rects
            ):
                rects.append((top, left, h, w))
                break
        else:
            raise GenerationError(
                f"could not place building {len(rects) + 1} of {p.n_buildings} "
                f"after {p.max_tries} tries"
            )
    return rects


def _sweep_mask(shape, rect, vec) -> np.ndarray:
    """Pixels whose centre lies in the rectangle swept along ``vec``.

    Pixel (r, c) has its centre at (r, c); the rectangle covers centres
    top..top+h-1, i.e. the continuous box [top-0.5, top+h-0.5].
    """
    top, left, h, w = rect
    vr, vc = vec
    r0, r1 = top - 0.5, top + h - 0.5
    c0, c1 = left - 0.5, left + w - 0.5
    H, W = shape
    rows = np.arange(max(0, math.floor(min(r0, r0 + vr))), min(H, math.ceil(max(r1, r1 + vr)) + 1))
    cols = np.arange(max(0, math.floor(min(c0, c0 + vc))), min(W, math.ceil(max(c1, c1 + vc)) + 1))
    mask = np.zeros(shape, dtype=bool)
    if rows.size == 0 or cols.size == 0:
        return mask
    R, C = np.meshgrid(rows.astype(np.float64), cols.astype(np.float64), indexing="ij")
    eps = 1e-9
    t_lo = np.zeros(R.shape)
    t_hi = np.ones(R.shape)
    ok = np.ones(R.shape, dtype=bool)
    for P, v, a, b in ((R, vr, r0, r1), (C, vc, c0, c1)):
        # need a <= P - t v <= b
        if abs(v) < eps:
            ok &= (P >= a - eps) & (P <= b + eps)
        else:
            ta, tb = (P - a) / v, (P - b) / v
            t_lo = np.maximum(t_lo, np.minimum(ta, tb))
            t_hi = np.minimum(t_hi, np.maximum(ta, tb))
    ok &= t_lo <= t_hi + eps
    mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = ok
    return mask


def block_mean(a: np.ndarray, r: int) -> np.ndarray:
    H, W = a.shape
    return a.reshape(H // r, r, W // r, r).mean(axis=(1, 3))


def _band_color(rng, band) -> np.ndarray:
    lo, hi = band
    return rng.uniform(lo, hi, size=3)


def render_scene(params: SceneParams) -> Scene:
    p = params
    rng = np.random.default_rng(p.seed)
    rects = _place(rng, p)
    shape = (p.world, p.world)
    heights = np.zeros(shape, dtype=np.float64)
    footprint = np.zeros(shape, dtype=bool)
    shadow = np.zeros(shape, dtype=bool)
    d = shadow_direction(p.sun_azimuth)
    buildings = []
    hmin, hmax = p.height_range
    for rect in rects:
        h_m = float(rng.uniform(hmin, hmax))
        top, left, h, w = rect
        buildings.append(Building(top, left, h, w, h_m))
        heights[top : top + h, left : left + w] = h_m
        footprint[top : top + h, left : left + w] = True
        L = shadow_length_px(h_m, p.sun_elevation, p.rgb_gsd)
        shadow |= _sweep_mask(shape, rect, (d[0] * L, d[1] * L))
    shadow &= ~footprint

    ground = _band_color(rng, p.ground_band)
    shade = _band_color(rng, p.shadow_band)
    img = np.empty(shape + (3,), dtype=np.float64)
    img[:] = ground
    img[shadow] = shade
    for b in buildings:
        img[b.top : b.top + b.height_px, b.left : b.left + b.width_px] = _band_color(rng, p.roof_band)
    if p.noise_sigma > 0:
        img = img + rng.normal(0.0, p.noise_sigma, size=img.shape)
    rgb = RgbImage(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), p.rgb_gsd)

    target_vals = block_mean(heights, p.ratio).astype(np.float32)
    target = RasterGrid(target_vals, np.ones(target_vals.shape, bool), p.rgb_gsd * p.ratio)
    return Scene(rgb, target, heights, shadow, buildings)


def generate_scene(params: SceneParams) -> Tuple[RgbImage, RasterGrid]:
    s = render_scene(params)
    return s.rgb, s.target


def scene_seeds(seed: int, n: int) -> List[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def generate_dataset(
    template: SceneParams,
    n_scenes: int,
    mode: DatasetMode = SYNTHETIC,
    split_seed: Optional[int] = None,
    stride: Optional[int] = None,
) -> PatchCatalog:
    """Render ``n_scenes`` scenes, cut them into patches and split 70/15/15."""
    if n_scenes < 1:
        raise InvalidArgument("n_scenes must be >= 1")
    if template.ratio != mode.ratio or not math.isclose(template.rgb_gsd, mode.rgb_gsd):
        raise InvalidArgument("scene resolution does not match the dataset mode")
    cats = []
    for i, seed in enumerate(scene_seeds(template.seed, n_scenes)):
        rgb, target = generate_scene(replace(template, seed=seed))
        dtm = RasterGrid(np.zeros(target.shape, np.float32), np.ones(target.shape, bool), target.gsd)
        cats.append(build_catalog(rgb, target, dtm, mode, stride, source_id=f"scene{i:05d}"))
    cat = merge_catalogs(cats)
    return split_catalog(cat, template.seed if split_seed is None else split_seed)

"""Binary shadow maps from RGB patches.

Pipeline: optional percentile contrast stretch, luma grayscale, optional
Gaussian blur, strict threshold.  Every step is either pointwise or
histogram-global, and the blur kernel is isotropic, so the map commutes
with quarter-turn rotations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument
from .grids import RgbImage, ShadowMap

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class ShadowParams:
    contrast_stretch: bool = True
    low_percentile: float = 2.0
    high_percentile: float = 98.0
    blur_sigma: float = 1.0
    threshold: int = 15

    def __post_init__(self):
        if not 0 <= self.low_percentile < self.high_percentile <= 100:
            raise InvalidArgument(
                f"need 0 <= low < high <= 100, got {self.low_percentile}, {self.high_percentile}"
            )
        if not 0 <= self.threshold <= 255:
            raise InvalidArgument(f"threshold must be in [0, 255], got {self.threshold}")
        if self.blur_sigma < 0:
            raise InvalidArgument(f"blur_sigma must be >= 0, got {self.blur_sigma}")


def _as_array(rgb) -> np.ndarray:
    if isinstance(rgb, RgbImage):
        return rgb.data
    a = np.asarray(rgb)
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidArgument(f"expected HxWx3 image, got {a.shape}")
    return a


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def to_grayscale(rgb) -> np.ndarray:
    """BT.601 luma, rounded half-up to uint8."""
    a = _as_array(rgb).astype(np.float64)
    wr, wg, wb = LUMA_WEIGHTS
    g = wr * a[..., 0] + wg * a[..., 1] + wb * a[..., 2]
    return np.clip(round_half_up(g), 0, 255).astype(np.uint8)


def stretch_contrast(rgb, low: float = 2.0, high: float = 98.0) -> np.ndarray:
    """Per-channel linear stretch mapping the [low, high] percentiles onto [0, 255].

    A channel whose two percentiles coincide is left as is.
    """
    a = _as_array(rgb)
    out = np.empty(a.shape, dtype=np.uint8)
    for c in range(3):
        ch = a[..., c].astype(np.float64)
        lo, hi = np.percentile(ch, [low, high])
        if hi <= lo:
            out[..., c] = a[..., c]
            continue
        s = (ch - lo) * 255.0 / (hi - lo)
        out[..., c] = np.clip(round_half_up(s), 0, 255).astype(np.uint8)
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(gray: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur, kernel half-width ceil(3*sigma), half-sample reflected borders."""
    g = np.asarray(gray, dtype=np.float64)
    if sigma <= 0:
        return g
    k = gaussian_kernel(sigma)
    g = ndimage.correlate1d(g, k, axis=0, mode="reflect")
    return ndimage.correlate1d(g, k, axis=1, mode="reflect")


def shadow_intensity(rgb, params: ShadowParams = ShadowParams()) -> np.ndarray:
    """The processed single-band image that gets thresholded."""
    a = _as_array(rgb)
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise InvalidArgument("empty image")
    if params.contrast_stretch:
        a = stretch_contrast(a, params.low_percentile, params.high_percentile)
    return gaussian_blur(to_grayscale(a), params.blur_sigma)


def compute_shadow_map(rgb, params: ShadowParams = ShadowParams()) -> ShadowMap:
    return ShadowMap((shadow_intensity(rgb, params) < params.threshold).astype(np.uint8))

"""Raster and image value types plus the two geometric transforms used everywhere.

All containers are frozen and hold read-only arrays, so they can be shared
between workers without copying.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple, TypeVar, Union

import numpy as np

from .errors import InvalidArgument

NODATA = np.float32(-9999.0)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """Real-valued raster (elevation, height) with a validity mask.

    Invalid pixels hold ``NODATA`` in ``values`` and must never be read
    arithmetically; always go through ``valid_mask``.
    """

    values: np.ndarray
    valid_mask: np.ndarray
    gsd: float
    origin: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if values.ndim != 2:
            raise InvalidArgument(f"raster must be 2-D, got shape {values.shape}")
        if mask.shape != values.shape:
            raise InvalidArgument(
                f"valid_mask shape {mask.shape} != values shape {values.shape}"
            )
        if not self.gsd > 0:
            raise InvalidArgument(f"gsd must be positive, got {self.gsd}")
        values = np.where(mask, values, NODATA).astype(np.float32)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "valid_mask", _frozen(mask))
        object.__setattr__(self, "gsd", float(self.gsd))

    @classmethod
    def from_array(cls, values, gsd: float, nodata=None, origin=None) -> "RasterGrid":
        """Build a grid, marking ``nodata`` and non-finite cells invalid."""
        values = np.asarray(values, dtype=np.float32)
        mask = np.isfinite(values)
        if nodata is not None:
            mask &= values != np.float32(nodata)
        return cls(values, mask, gsd, origin)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def with_values(self, values, valid_mask=None) -> "RasterGrid":
        return replace(
            self,
            values=values,
            valid_mask=self.valid_mask if valid_mask is None else valid_mask,
        )

    def __eq__(self, other):
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return (
            self.gsd == other.gsd
            and self.origin == other.origin
            and np.array_equal(self.valid_mask, other.valid_mask)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class RgbImage:
    """8-bit three-channel image stored as an ``(H, W, 3)`` uint8 array."""

    data: np.ndarray
    gsd: Optional[float] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InvalidArgument(f"RGB image must be HxWx3, got {data.shape}")
        if data.dtype != np.uint8:
            if np.any(data < 0) or np.any(data > 255):
                raise InvalidArgument("RGB intensities must lie in [0, 255]")
            data = data.astype(np.uint8)
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[:2]

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return self.gsd == other.gsd and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class ShadowMap:
    """Binary map, 1 marks a shadow pixel."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise InvalidArgument(f"shadow map must be 2-D, got {data.shape}")
        if data.dtype != np.uint8:
            if not np.all((data == 0) | (data == 1)):
                raise InvalidArgument("shadow map values must be 0 or 1")
            data = data.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise InvalidArgument("shadow map values must be 0 or 1")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, ShadowMap):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class PatchSample:
    rgb: RgbImage
    target: RasterGrid
    source_id: str = ""
    offset: Tuple[int, int] = (0, 0)
    split: Optional[str] = None
    valid: bool = True
    shadow: Optional[ShadowMap] = None


Gridlike = Union[RasterGrid, RgbImage, ShadowMap, np.ndarray]
G = TypeVar("G", RasterGrid, RgbImage, ShadowMap, np.ndarray)


def _map_arrays(grid, fn):
    if isinstance(grid, RasterGrid):
        return replace(grid, values=fn(grid.values), valid_mask=fn(grid.valid_mask))
    if isinstance(grid, (RgbImage, ShadowMap)):
        return replace(grid, data=fn(grid.data))
    if isinstance(grid, np.ndarray):
        return np.ascontiguousarray(fn(grid))
    raise InvalidArgument(f"unsupported grid type {type(grid).__name__}")


def rotate90(grid: G, k: int) -> G:
    """Rotate clockwise by ``k`` quarter turns, ``k`` in {0, 1, 2, 3}."""
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k not in (0, 1, 2, 3):
        raise InvalidArgument(f"k must be in {{0,1,2,3}}, got {k!r}")
    return _map_arrays(grid, lambda a: np.rot90(a, k=-int(k), axes=(0, 1)))


def _dims(grid) -> Tuple[int, int]:
    if isinstance(grid, np.ndarray):
        return grid.shape[0], grid.shape[1]
    return grid.shape[0], grid.shape[1]


def crop(grid: G, rect: Tuple[int, int, int, int]) -> G:
    """Copy out ``rect = (top, left, height, width)``; it must lie inside ``grid``."""
    top, left, h, w = (int(v) for v in rect)
    H, W = _dims(grid)
    if top < 0 or left < 0 or h < 0 or w < 0 or top + h > H or left + w > W:
        raise InvalidArgument(f"rect {rect} outside grid of size {H}x{W}")
    return _map_arrays(grid, lambda a: a[top : top + h, left : left + w].copy())


def rotate_rect(rect, k: int, shape) -> Tuple[int, int, int, int]:
    """Where ``rect`` of a grid of ``shape`` lands after ``rotate90(grid, k)``."""
    top, left, h, w = rect
    H, W = shape
    for _ in range(k % 4):
        # clockwise: (r, c) -> (c, H - 1 - r)
        top, left, h, w = left, H - top - h, w, h
        H, W = W, H
    return top, left, h, w

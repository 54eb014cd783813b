"""Raster and image file I/O.

Elevation rasters are read from GeoTIFF (ground-sample distance from the
ModelPixelScale tag, nodata from the GDAL_NODATA tag) or from a PNG with a
JSON sidecar ``<file>.json`` carrying ``gsd``, ``nodata``, ``scale`` and
``offset``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

from .errors import DataError
from .grids import NODATA, RasterGrid, RgbImage, ShadowMap

PIXEL_SCALE_TAG = 33550
TIEPOINT_TAG = 33922
GEOKEY_TAG = 34735
NODATA_TAG = 42113
PNG_HEIGHT_SCALE = 0.01  # PNG16 heightmaps store centimetres


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _read_sidecar(path) -> dict:
    p = sidecar_path(path)
    if not p.exists():
        return {}
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{p}: bad sidecar JSON ({e})") from e


def _is_tiff(path) -> bool:
    return Path(path).suffix.lower() in (".tif", ".tiff")


def read_raster(path, gsd=None, nodata=None) -> RasterGrid:
    """Read a single-band elevation raster."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    meta = _read_sidecar(path)
    origin = None
    try:
        if _is_tiff(path):
            with tifffile.TiffFile(path) as tif:
                page = tif.pages[0]
                values = page.asarray().astype(np.float32)
                tags = page.tags
                if PIXEL_SCALE_TAG in tags:
                    meta.setdefault("gsd", float(tags[PIXEL_SCALE_TAG].value[0]))
                if TIEPOINT_TAG in tags:
                    tp = tags[TIEPOINT_TAG].value
                    origin = (float(tp[3]), float(tp[4]))
                if NODATA_TAG in tags:
                    meta.setdefault("nodata", float(str(tags[NODATA_TAG].value).strip("\x00 ")))
        else:
            raw = np.asarray(Image.open(path))
            if raw.ndim != 2:
                raise DataError(f"{path}: elevation raster must be single-band")
            values = raw.astype(np.float64)
            nd = meta.get("nodata")
            invalid = values == nd if nd is not None else np.zeros(values.shape, bool)
            values = values * meta.get("scale", 1.0) + meta.get("offset", 0.0)
            values = np.where(invalid, NODATA, values).astype(np.float32)
            if nd is not None:
                meta["nodata"] = float(NODATA)
    except (OSError, ValueError, tifffile.TiffFileError) as e:
        raise DataError(f"{path}: {e}") from e
    if values.ndim != 2:
        raise DataError(f"{path}: elevation raster must be single-band, got {values.shape}")
    g = gsd if gsd is not None else meta.get("gsd")
    if g is None:
        raise DataError(f"{path}: ground-sample distance unknown (no tag or sidecar)")
    nd = nodata if nodata is not None else meta.get("nodata")
    return RasterGrid.from_array(values, g, nodata=nd, origin=origin or meta.get("origin"))


def read_rgb(path, gsd=None) -> RgbImage:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    try:
        if _is_tiff(path):
            data = tifffile.imread(path)
        else:
            data = np.asarray(Image.open(path).convert("RGB"))
    except (OSError, ValueError, tifffile.TiffFileError) as e:
        raise DataError(f"{path}: {e}") from e
    if data.ndim != 3 or data.shape[2] < 3:
        raise DataError(f"{path}: expected an RGB image, got shape {data.shape}")
    data = data[..., :3]
    if data.dtype != np.uint8:
        raise DataError(f"{path}: expected 8-bit channels, got {data.dtype}")
    g = gsd if gsd is not None else _read_sidecar(path).get("gsd")
    return RgbImage(data, g)


def write_rgb(path, rgb) -> None:
    data = rgb.data if isinstance(rgb, RgbImage) else np.asarray(rgb, dtype=np.uint8)
    Image.fromarray(data, "RGB").save(path)


def write_shadow_png(path, shadow: ShadowMap) -> None:
    """1-bit PNG: shadow pixels white, the rest black."""
    Image.fromarray(shadow.data.astype(bool)).convert("1").save(path)


def write_geotiff(path, grid: RasterGrid) -> None:
    values = np.where(grid.valid_mask, grid.values, NODATA).astype(np.float32)
    x0, y0 = grid.origin or (0.0, 0.0)
    extratags = [
        (PIXEL_SCALE_TAG, "d", 3, (grid.gsd, grid.gsd, 0.0), False),
        (TIEPOINT_TAG, "d", 6, (0.0, 0.0, 0.0, float(x0), float(y0), 0.0), False),
        # key directory header + GTRasterTypeGeoKey = PixelIsArea
        (GEOKEY_TAG, "H", 8, (1, 1, 0, 1, 1025, 0, 1, 1), False),
        (NODATA_TAG, "s", 0, f"{float(NODATA):g}", False),
    ]
    tifffile.imwrite(path, values, extratags=extratags, compression="zlib")


def write_heightmap(path, grid: RasterGrid) -> None:
    """GeoTIFF for .tif/.tiff, otherwise 16-bit PNG in centimetres plus sidecar."""
    path = Path(path)
    if _is_tiff(path):
        write_geotiff(path, grid)
        return
    cm = np.clip(np.floor(grid.values / PNG_HEIGHT_SCALE + 0.5), 0, 65534)
    cm = np.where(grid.valid_mask, cm, 65535).astype(np.uint16)
    Image.fromarray(cm).save(path)
    meta = {"gsd": grid.gsd, "nodata": 65535, "scale": PNG_HEIGHT_SCALE, "offset": 0.0}
    if grid.origin is not None:
        meta["origin"] = list(grid.origin)
    sidecar_path(path).write_text(json.dumps(meta, indent=2))


def heat_map(values: np.ndarray, vmax=None, cmap: str = "inferno", valid=None) -> np.ndarray:
    """Colour-relief rendering of a 2-D array as uint8 RGB; invalid cells are black."""
    from matplotlib import colormaps

    v = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(v) if valid is None else (np.asarray(valid, bool) & np.isfinite(v))
    lo = 0.0
    hi = float(vmax) if vmax is not None else (float(v[ok].max()) if ok.any() else 1.0)
    if hi <= lo:
        hi = lo + 1.0
    t = np.clip((np.where(ok, v, lo) - lo) / (hi - lo), 0.0, 1.0)
    rgb = (colormaps[cmap](t)[..., :3] * 255.0 + 0.5).astype(np.uint8)
    rgb[~ok] = 0
    return rgb


def write_heat_map(path, values, **kwargs) -> None:
    Image.fromarray(heat_map(values, **kwargs), "RGB").save(path)

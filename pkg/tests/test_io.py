import json

import numpy as np
import pytest
from PIL import Image

from shadowheight.errors import DataError
from shadowheight.grids import RasterGrid, RgbImage, ShadowMap
from shadowheight.io import (
    heat_map, read_raster, read_rgb, write_geotiff, write_heightmap, write_rgb, write_shadow_png,
)


def test_geotiff_roundtrip(tmp_path, rng):
    vals = rng.uniform(0, 50, (12, 9)).astype(np.float32)
    valid = rng.random((12, 9)) > 0.1
    g = RasterGrid(vals, valid, 0.5, (1000.0, 2000.0))
    write_geotiff(tmp_path / "h.tif", g)
    back = read_raster(tmp_path / "h.tif")
    assert back.gsd == 0.5 and back.origin == (1000.0, 2000.0)
    np.testing.assert_array_equal(back.valid_mask, valid)
    np.testing.assert_array_equal(back.values[valid], vals[valid])


def test_png16_heightmap_roundtrip(tmp_path):
    vals = np.array([[0.0, 1.234, 12.5], [99.99, 0.004, 3.0]], np.float32)
    valid = np.array([[True, True, True], [True, True, False]])
    write_heightmap(tmp_path / "h.png", RasterGrid(vals, valid, 1.0))
    raw = np.asarray(Image.open(tmp_path / "h.png"))
    assert raw.dtype == np.uint16 and raw[0, 1] == 123 and raw[1, 2] == 65535
    back = read_raster(tmp_path / "h.png")
    np.testing.assert_array_equal(back.valid_mask, valid)
    np.testing.assert_allclose(back.values[valid], np.round(vals[valid], 2), atol=1e-4)


def test_png_with_sidecar(tmp_path):
    Image.fromarray(np.array([[0, 5], [7, 255]], np.uint8)).save(tmp_path / "d.png")
    (tmp_path / "d.png.json").write_text(json.dumps({"gsd": 1.0, "nodata": 255, "scale": 0.5}))
    g = read_raster(tmp_path / "d.png")
    np.testing.assert_array_equal(g.valid_mask, [[True, True], [True, False]])
    np.testing.assert_array_equal(g.values[g.valid_mask], [0.0, 2.5, 3.5])


def test_raster_errors(tmp_path):
    with pytest.raises(DataError):
        read_raster(tmp_path / "nope.tif")
    Image.fromarray(np.zeros((2, 2), np.uint8)).save(tmp_path / "nogsd.png")
    with pytest.raises(DataError, match="ground-sample"):
        read_raster(tmp_path / "nogsd.png")
    (tmp_path / "junk.tif").write_bytes(b"not a tiff")
    with pytest.raises(DataError):
        read_raster(tmp_path / "junk.tif", gsd=1.0)


def test_rgb_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
    write_rgb(tmp_path / "a.png", RgbImage(img))
    np.testing.assert_array_equal(read_rgb(tmp_path / "a.png").data, img)
    assert read_rgb(tmp_path / "a.png", gsd=0.25).gsd == 0.25
    with pytest.raises(DataError):
        read_rgb(tmp_path / "missing.png")


def test_shadow_png_is_binary(tmp_path):
    m = ShadowMap(np.array([[0, 1], [1, 0]], np.uint8))
    write_shadow_png(tmp_path / "s.png", m)
    im = Image.open(tmp_path / "s.png")
    assert im.mode == "1"
    np.testing.assert_array_equal(np.asarray(im.convert("L")), [[0, 255], [255, 0]])


def test_heat_map():
    rgb = heat_map(np.array([[0.0, 5.0], [10.0, np.nan]]))
    assert rgb.shape == (2, 2, 3) and rgb.dtype == np.uint8
    assert (rgb[1, 1] == 0).all()
    assert rgb[1, 0].sum() > rgb[0, 0].sum()

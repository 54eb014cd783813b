import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shadowheight.errors import EmptyInput, InvalidArgument
from shadowheight.grids import RgbImage
from shadowheight.infer import (
    EvalReport, error_stats, evaluate, plan_tiles, predict_full, predict_tiles, summarize,
)
from shadowheight.net import build_model, forward, preset
from shadowheight.datapipe import assemble_input
from shadowheight.synthcity import SceneParams, generate_dataset


@pytest.fixture(scope="module")
def micro():
    return build_model(preset("micro"), seed=0)


# tiling plan


def test_plan_large_scene():
    t = plan_tiles(4000, 4000, 256, 4)
    assert (t.pad_bottom, t.pad_right) == (96, 96)
    assert (t.grid_rows, t.grid_cols, t.n_tiles) == (16, 16, 256)
    assert (t.out_height, t.out_width) == (1000, 1000)


def test_plan_exact():
    t = plan_tiles(512, 512, 256, 4)
    assert (t.pad_bottom, t.pad_right, t.grid_rows, t.grid_cols, t.out_height, t.out_width) == (0, 0, 2, 2, 128, 128)


def test_plan_uneven():
    t = plan_tiles(300, 520, 256, 4)
    assert (t.pad_bottom, t.pad_right) == (212, 248)
    assert (t.grid_rows, t.grid_cols) == (2, 3)
    assert (t.out_height, t.out_width) == (75, 130)


def test_plan_errors():
    with pytest.raises(InvalidArgument):
        plan_tiles(100, 100, 250, 4)
    with pytest.raises(InvalidArgument):
        plan_tiles(0, 100, 256, 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5000), st.integers(1, 5000), st.sampled_from([(256, 4), (520, 10), (64, 4)]))
def test_plan_invariants(h, w, pr):
    patch, ratio = pr
    t = plan_tiles(h, w, patch, ratio)
    assert (h + t.pad_bottom) % patch == 0 and (w + t.pad_right) % patch == 0
    assert 0 <= t.pad_bottom < patch and 0 <= t.pad_right < patch
    assert (t.out_height, t.out_width) == (h // ratio, w // ratio)
    assert t.grid_rows * patch == h + t.pad_bottom


# whole-image prediction


def test_single_patch_image(micro, rng):
    img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    out = predict_full(micro, RgbImage(img, 0.25))
    ref = forward(micro, assemble_input(img)[None])[0, ..., 0]
    np.testing.assert_array_equal(out.values, np.maximum(ref, 0))
    assert out.gsd == 1.0


def test_tiles_equal_standalone(micro, rng):
    img = rng.integers(0, 256, (128, 192, 3), dtype=np.uint8)
    img[40:90, 50:120] //= 20  # some shadow
    full = predict_full(micro, RgbImage(img)).values
    seen = np.zeros(full.shape, int)
    for t in range(2):
        for l in range(3):
            tile = img[t * 64 : t * 64 + 64, l * 64 : l * 64 + 64]
            alone = np.maximum(predict_tiles(micro, tile[None])[0], 0)
            np.testing.assert_array_equal(full[t * 16 : t * 16 + 16, l * 16 : l * 16 + 16], alone)
            seen[t * 16 : t * 16 + 16, l * 16 : l * 16 + 16] += 1
    assert (seen == 1).all()


def test_output_shapes_follow_plan(micro):
    rng = np.random.default_rng(8)
    for _ in range(10):
        h, w = (int(v) for v in rng.integers(20, 200, 2))
        out = predict_full(micro, RgbImage(rng.integers(0, 256, (h, w, 3), dtype=np.uint8)))
        t = plan_tiles(h, w, 64, 4)
        assert out.shape == (t.out_height, t.out_width)
        assert (out.values >= 0).all()


def test_predict_deterministic(micro, rng):
    img = RgbImage(rng.integers(0, 256, (100, 70, 3), dtype=np.uint8))
    np.testing.assert_array_equal(predict_full(micro, img).values, predict_full(micro, img).values)


def test_masking_one_tile_leaves_others(micro, rng):
    img = rng.integers(0, 256, (128, 128, 3), dtype=np.uint8)
    a = predict_full(micro, RgbImage(img)).values
    img2 = img.copy()
    img2[10:40, 70:100] = 0  # inside tile (0, 1)
    b = predict_full(micro, RgbImage(img2)).values
    changed = a != b
    assert changed[:16, 16:].any()
    changed[:16, 16:] = False
    assert not changed.any()


# metrics


def test_error_stats_examples():
    assert error_stats(np.zeros(5)) == (0.0, 0.0)
    assert error_stats(np.full(7, 2.0)) == (2.0, 2.0)
    mae, rmse = error_stats(np.array([3.0, 4.0]))
    assert mae == 3.5
    assert rmse == pytest.approx(3.53553, abs=1e-5)
    with pytest.raises(EmptyInput):
        error_stats(np.zeros(0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1, max_size=50),
       st.floats(-100, 100))
def test_metric_properties(pairs, shift):
    p, t = (np.array(v) for v in zip(*pairs))
    mae, rmse = error_stats(p - t)
    assert 0 <= mae <= rmse + 1e-9
    mae2, rmse2 = error_stats((p + shift) - (t + shift))
    assert mae2 == pytest.approx(mae, abs=1e-9) and rmse2 == pytest.approx(rmse, abs=1e-9)


def test_summarize_pools_and_groups():
    mask = np.ones(2, bool)
    rep = summarize([
        ("a", np.array([3.0, 0.0]), np.array([0.0, 0.0]), mask),
        ("b", np.array([4.0, 4.0]), np.array([0.0, 0.0]), mask),
        ("a", np.array([9.0, 1.0]), np.array([9.0, 0.0]), np.array([True, False])),
    ])
    assert rep.n_pixels == 5
    assert rep.mae == pytest.approx(11 / 5)
    assert rep.rmse == pytest.approx(math.sqrt(41 / 5))
    assert [p["id"] for p in rep.per_image] == ["a", "b"]
    assert rep.per_image[0]["mae"] == pytest.approx(1.0)
    assert rep.macro_mae == pytest.approx(2.5)
    with pytest.raises(EmptyInput):
        summarize([])


def test_report_rejects_inconsistent_metrics():
    with pytest.raises(AssertionError):
        EvalReport(2.0, 1.0, 3)


def test_report_json():
    rep = summarize([("a", np.array([1.0]), np.array([0.0]), np.array([True]))], mode="synthetic")
    d = json.loads(rep.dumps())
    assert d["schema_version"] == 1
    assert {"mae", "rmse", "n_pixels", "per_image", "mode", "used_shadow_channel"} <= set(d)
    assert rep.dumps() == rep.dumps()


def test_evaluate_catalog(micro):
    cat = generate_dataset(SceneParams(world=128, n_buildings=3, seed=5), 3)
    rep = evaluate(micro, cat, "test")
    assert rep.n_pixels == len(cat.split_records("test")) * 256
    assert rep.rmse >= rep.mae >= 0
    assert rep.mode == "synthetic" and rep.used_shadow_channel
    with pytest.raises(EmptyInput):
        evaluate(micro, cat, "nonexistent")

import json

import numpy as np
import pytest
from PIL import Image

from shadowheight.cli import build_parser, run
from shadowheight.grids import RasterGrid
from shadowheight.io import read_raster, write_geotiff, write_rgb
from shadowheight.net import build_model, preset
from shadowheight.train import make_checkpoint, save_checkpoint

SUBCOMMANDS = ["shadowmap", "prepare", "synth", "train", "evaluate", "predict", "probe"]


@pytest.fixture(scope="module")
def micro_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "micro.ckpt"
    save_checkpoint(make_checkpoint(build_model(preset("micro"), seed=0)), path)
    return path


@pytest.fixture(scope="module")
def synth_catalog(tmp_path_factory):
    out = tmp_path_factory.mktemp("cat") / "cat"
    assert run(["synth", "--n-scenes", "3", "--world", "128", "--seed", "2", "--out", str(out)]) == 0
    return out


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert run([cmd, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_usage_errors(capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["shadowmap", "--in", "x.png"]) == 1
    err = capsys.readouterr().err
    assert "shadowheight: error[usage]:" in err


def test_shadowmap(tmp_path, rng):
    img = rng.integers(0, 256, (40, 30, 3), dtype=np.uint8)
    img[5:20, 5:20] = 3
    write_rgb(tmp_path / "img.png", img)
    assert run(["shadowmap", "--in", str(tmp_path / "img.png"), "--out", str(tmp_path / "map.png")]) == 0
    m = np.asarray(Image.open(tmp_path / "map.png").convert("L"))
    assert m.shape == (40, 30) and set(np.unique(m)) <= {0, 255}
    assert m[10, 10] == 255


def test_missing_input_is_data_error(tmp_path, capsys):
    assert run(["shadowmap", "--in", str(tmp_path / "none.png"), "--out", str(tmp_path / "m.png")]) == 2
    assert "error[data]" in capsys.readouterr().err


def test_bad_config_is_usage_error(tmp_path):
    (tmp_path / "c.yaml").write_text("bogus: 1\n")
    assert run(["shadowmap", "--config", str(tmp_path / "c.yaml"), "--in", "a", "--out", "b"]) == 1


def test_prepare(tmp_path, rng):
    write_rgb(tmp_path / "rgb.png", rng.integers(0, 256, (512, 256, 3), dtype=np.uint8))
    dsm = rng.uniform(0, 30, (128, 64)).astype(np.float32)
    dsm[100, 10] = -9999.0
    write_geotiff(tmp_path / "dsm.tif", RasterGrid.from_array(dsm, 1.0, nodata=-9999.0))
    write_geotiff(tmp_path / "dtm.tif", RasterGrid.from_array(np.zeros((128, 64), np.float32), 1.0))
    out = tmp_path / "cat"
    args = ["prepare", "--rgb", str(tmp_path / "rgb.png"), "--dsm", str(tmp_path / "dsm.tif"),
            "--dtm", str(tmp_path / "dtm.tif"), "--out", str(out)]
    assert run(args) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert [r["valid"] for r in manifest["records"]] == [True, False]
    assert manifest["records"][1]["reject_reason"] == "nodata"


def test_prepare_misaligned(tmp_path, rng):
    write_rgb(tmp_path / "rgb.png", rng.integers(0, 256, (500, 256, 3), dtype=np.uint8))
    write_geotiff(tmp_path / "d.tif", RasterGrid.from_array(np.zeros((128, 64), np.float32), 1.0))
    assert run(["prepare", "--rgb", str(tmp_path / "rgb.png"), "--dsm", str(tmp_path / "d.tif"),
                "--dtm", str(tmp_path / "d.tif"), "--out", str(tmp_path / "c")]) == 2


def test_synth_reproducible(tmp_path, synth_catalog):
    out = tmp_path / "again"
    assert run(["synth", "--n-scenes", "3", "--world", "128", "--seed", "2", "--out", str(out)]) == 0
    assert (out / "manifest.json").read_bytes() == (synth_catalog / "manifest.json").read_bytes()


def test_train_evaluate_predict_probe(tmp_path, synth_catalog, rng):
    ck = tmp_path / "run"
    assert run(["train", "--catalog", str(synth_catalog), "--out", str(ck), "--preset", "micro",
                "--epochs", "1", "--batch-size", "4", "--seed", "1"]) == 0
    hist = json.loads((ck / "history.json").read_text())
    assert len(hist["history"]) == 1 and hist["preset"] == "micro"
    for name in ("best.ckpt", "last.ckpt"):
        assert (ck / name).exists()

    reports = []
    for i in range(2):
        rep = tmp_path / f"report{i}.json"
        assert run(["evaluate", "--checkpoint", str(ck / "best.ckpt"), "--catalog", str(synth_catalog),
                    "--out", str(rep)]) == 0
        reports.append(rep.read_bytes())
    assert reports[0] == reports[1]
    d = json.loads(reports[0])
    assert d["schema_version"] == 1 and d["rmse"] >= d["mae"] >= 0

    write_rgb(tmp_path / "patch.png", rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
    out = tmp_path / "probe"
    assert run(["probe", "--checkpoint", str(ck / "best.ckpt"), "--in", str(tmp_path / "patch.png"),
                "--out", str(out), "--mask-size", "16", "--stride", "16"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_positions"] == 16
    assert np.load(out / "deltas.npy").shape == (16, 16, 16)
    assert (out / "aggregate.png").exists()


def test_train_no_shadow_channel(tmp_path, synth_catalog):
    ck = tmp_path / "run"
    assert run(["train", "--catalog", str(synth_catalog), "--out", str(ck), "--preset", "micro",
                "--epochs", "1", "--batch-size", "8", "--no-shadow-channel"]) == 0
    assert json.loads((ck / "history.json").read_text())["use_shadow_channel"] is False


def test_train_wrong_preset_size(tmp_path, synth_catalog):
    assert run(["train", "--catalog", str(synth_catalog), "--out", str(tmp_path / "r"),
                "--preset", "manchester", "--epochs", "1"]) == 2


def test_predict_512(tmp_path, micro_ckpt, rng):
    write_rgb(tmp_path / "big.png", rng.integers(0, 256, (512, 512, 3), dtype=np.uint8))
    assert run(["predict", "--checkpoint", str(micro_ckpt), "--in", str(tmp_path / "big.png"),
                "--out", str(tmp_path / "h.tif"), "--gsd", "0.25", "--heat-map", str(tmp_path / "h.png")]) == 0
    g = read_raster(tmp_path / "h.tif")
    assert g.shape == (128, 128) and g.gsd == 1.0
    assert np.asarray(Image.open(tmp_path / "h.png")).shape == (128, 128, 3)


def test_evaluate_empty_split(tmp_path, micro_ckpt, capsys):
    out = tmp_path / "c"
    (tmp_path / "s.yaml").write_text("synth:\n  n_buildings: 1\n  footprint_range: [8, 16]\n")
    assert run(["synth", "--config", str(tmp_path / "s.yaml"), "--n-scenes", "1", "--world", "64",
                "--out", str(out)]) == 0
    rep = tmp_path / "r.json"
    assert run(["evaluate", "--checkpoint", str(micro_ckpt), "--catalog", str(out), "--out", str(rep)]) == 2
    assert not rep.exists()
    assert "error[data]" in capsys.readouterr().err


def test_bad_checkpoint(tmp_path, rng):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    write_rgb(tmp_path / "i.png", rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
    assert run(["predict", "--checkpoint", str(tmp_path / "bad.ckpt"), "--in", str(tmp_path / "i.png"),
                "--out", str(tmp_path / "o.tif")]) == 2


def test_diverged_exit_code(tmp_path, synth_catalog):
    (tmp_path / "c.yaml").write_text("train:\n  lr0: 1.0e+30\n")
    code = run(["train", "--config", str(tmp_path / "c.yaml"), "--catalog", str(synth_catalog),
                "--out", str(tmp_path / "r"), "--preset", "micro", "--epochs", "3", "--batch-size", "4"])
    assert code == 3

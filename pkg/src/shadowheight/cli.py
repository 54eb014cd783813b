"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training diverged.
Errors go to stderr as ``shadowheight: error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import AppConfig, load_config
from .errors import (CheckpointError, DataError, EmptyInput, GenerationError, InvalidArgument,
                     SpecError, TrainingDiverged)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
PROG = "shadowheight"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fail(kind: str, message: str, code: int) -> int:
    print(f"{PROG}: error[{kind}]: {message}", file=sys.stderr)
    return code


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _shadow_params(cfg: AppConfig, args):
    sp = cfg.shadow
    over = {}
    if getattr(args, "threshold", None) is not None:
        over["threshold"] = args.threshold
    if getattr(args, "blur_sigma", None) is not None:
        over["blur_sigma"] = args.blur_sigma
    if getattr(args, "no_stretch", False):
        over["contrast_stretch"] = False
    return dataclasses.replace(sp, **over) if over else sp


# --------------------------------------------------------------------------
# subcommands


def cmd_shadowmap(cfg, args):
    from .io import read_rgb, write_shadow_png
    from .shadow import compute_shadow_map

    rgb = read_rgb(args.input)
    write_shadow_png(args.out, compute_shadow_map(rgb, _shadow_params(cfg, args)))
    return EXIT_OK


def cmd_prepare(cfg, args):
    from .datapipe import MODES, build_catalog, merge_catalogs, save_catalog, split_catalog
    from .io import read_raster, read_rgb

    if not (len(args.rgb) == len(args.dsm) == len(args.dtm)):
        raise UsageError("--rgb, --dsm and --dtm must be given the same number of times")
    mode = MODES[args.mode]
    cats = []
    for i, (r, s, t) in enumerate(zip(args.rgb, args.dsm, args.dtm)):
        rgb = read_rgb(r)
        dsm, dtm = read_raster(s), read_raster(t)
        try:
            cats.append(build_catalog(rgb, dsm, dtm, mode, args.stride, source_id=Path(r).stem,
                                      first_id=0))
        except InvalidArgument as e:
            raise DataError(f"{r}: {e}") from e
    cat = split_catalog(merge_catalogs(cats), cfg.seed)
    out = args.out or cfg.paths.catalog
    if out is None:
        raise UsageError("no output catalog directory (--out or paths.catalog)")
    save_catalog(cat, out)
    _write_summary(cat, out)
    return EXIT_OK


def _write_summary(cat, out):
    reasons = {}
    for r in cat.records:
        if not r.valid:
            reasons[r.reject_reason] = reasons.get(r.reject_reason, 0) + 1
    print(json.dumps({"records": len(cat.records), "splits": cat.split_sizes(), "rejected": reasons},
                     sort_keys=True))


def cmd_synth(cfg, args):
    from .datapipe import SYNTHETIC, save_catalog
    from .synthcity import generate_dataset

    scene = dataclasses.replace(cfg.synth, seed=cfg.seed)
    if args.world is not None:
        scene = dataclasses.replace(scene, world=args.world)
    mode = SYNTHETIC
    if args.patch is not None:
        mode = dataclasses.replace(SYNTHETIC, patch_rgb=args.patch, patch_out=args.patch // SYNTHETIC.ratio)
    cat = generate_dataset(scene, args.n_scenes, mode)
    out = args.out or cfg.paths.catalog
    if out is None:
        raise UsageError("no output catalog directory (--out or paths.catalog)")
    save_catalog(cat, out)
    _write_summary(cat, out)
    return EXIT_OK


def cmd_train(cfg, args):
    from .datapipe import load_catalog
    from .net import build_model, preset
    from .train import fit, load_checkpoint, save_checkpoint

    catalog = load_catalog(args.catalog or cfg.paths.catalog or _missing("--catalog"))
    tc = cfg.train
    over = {"seed": cfg.seed}
    if args.epochs is not None:
        over["max_epochs"] = args.epochs
    if args.batch_size is not None:
        over["batch_size"] = args.batch_size
    if args.lr is not None:
        over["lr0"] = args.lr
    if args.no_shadow_channel:
        over["use_shadow_channel"] = False
    tc = dataclasses.replace(tc, **over)
    out = Path(args.out or cfg.paths.checkpoints or _missing("--out"))
    resume = load_checkpoint(args.resume) if args.resume else None
    spec = resume.spec if resume else preset(cfg.preset, tc.use_shadow_channel)
    if spec.input_size != catalog.mode.patch_rgb:
        raise DataError(
            f"preset {spec.name} takes {spec.input_size}px patches, catalog has {catalog.mode.patch_rgb}px"
        )
    model = build_model(spec, cfg.seed)
    best, history = fit(model, catalog, tc, _shadow_params(cfg, args), checkpoint_dir=out, resume=resume)
    save_checkpoint(best, out / "best.ckpt")
    _write_json(out / "history.json", {"schema_version": 1, "preset": spec.name,
                                       "use_shadow_channel": tc.use_shadow_channel, "history": history})
    return EXIT_OK


def _missing(flag):
    raise UsageError(f"{flag} is required (or set it in the config file)")


def cmd_evaluate(cfg, args):
    from .datapipe import load_catalog
    from .infer import evaluate
    from .train import load_checkpoint, model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    catalog = load_catalog(args.catalog or cfg.paths.catalog or _missing("--catalog"))
    report = evaluate(model, catalog, args.split, _shadow_params(cfg, args))
    d = report.to_json()
    d["model"] = model.spec.name
    _write_json(args.out, d)
    print(json.dumps({"mae": report.mae, "rmse": report.rmse, "n_pixels": report.n_pixels}))
    return EXIT_OK


def cmd_predict(cfg, args):
    from .infer import predict_full
    from .io import read_rgb, write_heat_map, write_heightmap
    from .train import load_checkpoint, model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    rgb = read_rgb(args.input, gsd=args.gsd)
    grid = predict_full(model, rgb, _shadow_params(cfg, args), batch_size=1)
    write_heightmap(args.out, grid)
    if args.heat_map:
        write_heat_map(args.heat_map, grid.values, vmax=args.vmax)
    print(json.dumps({"height": grid.height, "width": grid.width, "gsd": grid.gsd}))
    return EXIT_OK


def cmd_probe(cfg, args):
    from .datapipe import assemble_input
    from .io import read_rgb, write_heat_map
    from .probe import sensitivity_sweep
    from .train import load_checkpoint, model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    pc = cfg.probe
    over = {k: v for k, v in (("mask_size", args.mask_size), ("stride", args.stride),
                              ("target", args.target), ("aggregate", args.aggregate)) if v is not None}
    pc = dataclasses.replace(pc, **over)
    rgb = read_rgb(args.input)
    x = assemble_input(rgb, _shadow_params(cfg, args), model.spec.input_channels == 4)
    res = sensitivity_sweep(model, x, pc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "deltas.npy", res.deltas)
    np.save(out / "aggregate.npy", res.aggregate)
    write_heat_map(out / "aggregate.png", np.abs(res.aggregate))
    if res.positions:
        write_heat_map(out / "positions.png", res.position_grid())
    _write_json(out / "summary.json", res.summary())
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file; flags override it")
    common.add_argument("--seed", type=int, help="seed for every random choice in the run")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    shadow = _Parser(add_help=False)
    shadow.add_argument("--threshold", type=int, help="shadow intensity threshold (default 15)")
    shadow.add_argument("--blur-sigma", type=float, help="Gaussian blur sigma in pixels, 0 disables")
    shadow.add_argument("--no-stretch", action="store_true", help="skip the percentile contrast stretch")

    from .net import PRESETS
    from .datapipe import MODES

    p = _Parser(prog=PROG, description="Shadow-aware heightmap estimation from RGB aerial imagery.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("shadowmap", parents=[common, shadow], help="binary shadow map of an image")
    s.add_argument("--in", dest="input", required=True, metavar="IMAGE", help="RGB image")
    s.add_argument("--out", required=True, metavar="PNG", help="output 1-bit PNG")
    s.set_defaults(func=cmd_shadowmap)

    s = sub.add_parser("prepare", parents=[common], help="cut RGB/DSM/DTM rasters into a patch catalog")
    s.add_argument("--rgb", action="append", default=[], required=True, help="RGB raster (repeatable)")
    s.add_argument("--dsm", action="append", default=[], required=True, help="DSM raster (repeatable)")
    s.add_argument("--dtm", action="append", default=[], required=True, help="DTM raster (repeatable)")
    s.add_argument("--mode", choices=sorted(MODES), default="manchester_buildings", help="dataset geometry")
    s.add_argument("--stride", type=int, help="patch stride in RGB pixels (default: patch size)")
    s.add_argument("--out", metavar="DIR", help="catalog directory")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic patch catalog")
    s.add_argument("--n-scenes", type=int, required=True, help="number of scenes to render")
    s.add_argument("--world", type=int, help="scene side length in RGB pixels")
    s.add_argument("--patch", type=int, help="RGB patch size (default 64)")
    s.add_argument("--out", metavar="DIR", help="catalog directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common, shadow], help="train a model on a catalog")
    s.add_argument("--catalog", metavar="DIR", help="catalog directory")
    s.add_argument("--out", metavar="DIR", help="checkpoint directory")
    s.add_argument("--preset", choices=PRESETS, help="architecture preset")
    s.add_argument("--epochs", type=int, help="maximum epochs")
    s.add_argument("--batch-size", type=int, help="batch size")
    s.add_argument("--lr", type=float, help="initial learning rate")
    s.add_argument("--no-shadow-channel", action="store_true", help="train on RGB only (ablation)")
    s.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common, shadow], help="MAE/RMSE report on a catalog split")
    s.add_argument("--checkpoint", required=True, metavar="CKPT", help="model checkpoint")
    s.add_argument("--catalog", metavar="DIR", help="catalog directory")
    s.add_argument("--split", choices=("train", "val", "test"), default="test", help="split to score")
    s.add_argument("--out", required=True, metavar="JSON", help="report file")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", parents=[common, shadow], help="heightmap of a whole image")
    s.add_argument("--checkpoint", required=True, metavar="CKPT", help="model checkpoint")
    s.add_argument("--in", dest="input", required=True, metavar="IMAGE", help="RGB image")
    s.add_argument("--out", required=True, metavar="RASTER", help=".tif (GeoTIFF) or .png (centimetres)")
    s.add_argument("--gsd", type=float, help="RGB ground-sample distance in metres")
    s.add_argument("--heat-map", metavar="PNG", help="also write a colour-relief PNG")
    s.add_argument("--vmax", type=float, help="heat-map upper bound in metres")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("probe", parents=[common, shadow], help="sliding-mask sensitivity of one patch")
    s.add_argument("--checkpoint", required=True, metavar="CKPT", help="model checkpoint")
    s.add_argument("--in", dest="input", required=True, metavar="IMAGE", help="RGB patch")
    s.add_argument("--out", required=True, metavar="DIR", help="output directory")
    s.add_argument("--mask-size", type=int, help="mask side length in pixels")
    s.add_argument("--stride", type=int, help="mask stride in pixels")
    s.add_argument("--target", choices=("rgb_zero", "shadow_one", "shadow_zero", "rgb_brighten"),
                   help="what the mask does")
    s.add_argument("--aggregate", choices=("max_abs", "mean"), help="how delta maps are combined")
    s.set_defaults(func=cmd_probe)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:  # --help / --version
            return int(e.code or 0)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if getattr(args, "preset", None):
            cfg = dataclasses.replace(cfg, preset=args.preset)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(cfg, args)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    except TrainingDiverged as e:
        return _fail("diverged", str(e), EXIT_DIVERGED)
    except (DataError, EmptyInput, CheckpointError, GenerationError) as e:
        return _fail("data", str(e), EXIT_DATA)
    except (InvalidArgument, SpecError) as e:
        return _fail("usage", str(e), EXIT_USAGE)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

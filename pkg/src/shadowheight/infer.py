"""Whole-image tiled inference and MAE/RMSE evaluation."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np
import torch

from .datapipe import PatchCatalog, assemble_input
from .errors import EmptyInput, InvalidArgument
from .grids import RasterGrid, RgbImage
from .net import HeightNet, nhwc_to_tensor
from .shadow import ShadowParams
from .train import predict_split

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TileLayout:
    patch: int
    ratio: int
    grid_rows: int
    grid_cols: int
    pad_bottom: int
    pad_right: int
    out_height: int
    out_width: int

    @property
    def n_tiles(self) -> int:
        return self.grid_rows * self.grid_cols

    def tiles(self) -> List[Tuple[int, int]]:
        """Top-left RGB offsets of every tile, row-major."""
        return [(r * self.patch, c * self.patch)
                for r in range(self.grid_rows) for c in range(self.grid_cols)]


def plan_tiles(height: int, width: int, patch: int, ratio: int) -> TileLayout:
    if patch < 1 or ratio < 1 or patch % ratio:
        raise InvalidArgument(f"patch {patch} must be a positive multiple of ratio {ratio}")
    if height < 1 or width < 1:
        raise InvalidArgument(f"image must be non-empty, got {height}x{width}")
    pb, pr = (-height) % patch, (-width) % patch
    return TileLayout(
        patch, ratio, (height + pb) // patch, (width + pr) // patch, pb, pr,
        height // ratio, width // ratio,
    )


def model_ratio(model: HeightNet) -> int:
    spec = model.spec
    if spec.input_size % spec.output_size:
        raise InvalidArgument(f"{spec.name}: input {spec.input_size} not a multiple of output")
    return spec.input_size // spec.output_size


def predict_tiles(model: HeightNet, tiles: np.ndarray, shadow_params: ShadowParams = ShadowParams(),
                  batch_size: int = 1) -> np.ndarray:
    """Eval-mode predictions (unclamped) for a stack of ``N x P x P x 3`` uint8 tiles.

    Convolution kernels may pick different summation orders for different
    batch sizes, so only ``batch_size=1`` guarantees that a tile's output is
    bit-identical to predicting that tile on its own.
    """
    use_shadow = model.spec.input_channels == 4
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(tiles), batch_size):
            x = np.stack([assemble_input(t, shadow_params, use_shadow) for t in tiles[i : i + batch_size]])
            out.append(model(nhwc_to_tensor(x))[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0, model.spec.output_size, model.spec.output_size), np.float32)


def predict_full(model: HeightNet, rgb: RgbImage, shadow_params: ShadowParams = ShadowParams(),
                 batch_size: int = 1, rgb_gsd: Optional[float] = None) -> RasterGrid:
    """Heightmap of an arbitrarily sized image: reflect-pad, tile, predict, stitch, crop, clamp."""
    P = model.spec.input_size
    ratio = model_ratio(model)
    layout = plan_tiles(rgb.height, rgb.width, P, ratio)
    data = rgb.data
    if layout.pad_bottom or layout.pad_right:
        data = np.pad(data, ((0, layout.pad_bottom), (0, layout.pad_right), (0, 0)), mode="reflect")
    tiles = np.stack([data[t : t + P, l : l + P] for t, l in layout.tiles()])
    preds = predict_tiles(model, tiles, shadow_params, batch_size)
    p = P // ratio
    full = np.empty((layout.grid_rows * p, layout.grid_cols * p), np.float32)
    for (t, l), pred in zip(layout.tiles(), preds):
        full[t // ratio : t // ratio + p, l // ratio : l // ratio + p] = pred
    full = np.maximum(full[: layout.out_height, : layout.out_width], 0.0)
    gsd = rgb_gsd if rgb_gsd is not None else (rgb.gsd if rgb.gsd is not None else 1.0 / ratio)
    return RasterGrid(full, np.ones(full.shape, bool), gsd * ratio)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mae: float
    rmse: float
    n_pixels: int
    per_image: List[dict] = field(default_factory=list)
    mode: str = ""
    used_shadow_channel: bool = True
    split: str = "test"
    macro_mae: float = 0.0
    macro_rmse: float = 0.0

    def __post_init__(self):
        if self.mae < 0 or self.rmse < self.mae - 1e-9 * max(1.0, self.mae):
            raise AssertionError(f"inconsistent metrics: mae={self.mae}, rmse={self.rmse}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA_VERSION
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def error_stats(residuals: np.ndarray) -> Tuple[float, float]:
    r = np.asarray(residuals, dtype=np.float64).ravel()
    if r.size == 0:
        raise EmptyInput("no valid pixels")
    return float(np.abs(r).mean()), float(np.sqrt(np.mean(r * r)))


def summarize(items: Iterable[Tuple[str, np.ndarray, np.ndarray, np.ndarray]], mode: str = "",
              used_shadow_channel: bool = True, split: str = "test") -> EvalReport:
    """Pool ``(image id, prediction, target, mask)`` tuples into a report.

    Headline numbers are pixel-pooled over everything; ``per_image`` and the
    macro averages group by image id.
    """
    groups = defaultdict(list)
    for image_id, pred, target, mask in items:
        mask = np.asarray(mask, bool)
        groups[image_id].append((np.asarray(pred, np.float64) - np.asarray(target, np.float64))[mask])
    if not groups:
        raise EmptyInput(f"split {split!r} is empty")
    all_res = np.concatenate([r for rs in groups.values() for r in rs])
    mae, rmse = error_stats(all_res)
    per_image = []
    for image_id in sorted(groups):
        res = np.concatenate(groups[image_id])
        if res.size:
            m, r = error_stats(res)
            per_image.append({"id": image_id, "mae": m, "rmse": r, "n_pixels": int(res.size)})
    macro_mae = float(np.mean([p["mae"] for p in per_image])) if per_image else 0.0
    macro_rmse = float(np.mean([p["rmse"] for p in per_image])) if per_image else 0.0
    return EvalReport(mae, rmse, int(all_res.size), per_image, mode, used_shadow_channel, split,
                      macro_mae, macro_rmse)


def evaluate(model: HeightNet, catalog: PatchCatalog, split: str = "test",
             shadow_params: ShadowParams = ShadowParams(), batch_size: int = 32) -> EvalReport:
    """Pooled MAE / RMSE of clamped eval-mode predictions over a catalog split."""
    recs = {r.id: r for r in catalog.split_records(split)}
    if not recs:
        raise EmptyInput(f"split {split!r} is empty")
    use_shadow = model.spec.input_channels == 4

    def items():
        for pred, y, mask, ids in predict_split(model, catalog, split, shadow_params, use_shadow, batch_size):
            for k, rid in enumerate(ids):
                yield recs[rid].source_id, pred[k], y[k], mask[k]

    return summarize(items(), catalog.mode.name, use_shadow, split)

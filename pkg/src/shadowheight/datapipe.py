"""From (RGB, DSM, DTM) rasters to split, augmented, 4-channel training batches."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import tifffile
from PIL import Image

from .errors import DataError, EmptyInput, InvalidArgument
from .grids import PatchSample, RasterGrid, RgbImage, crop, rotate90
from .shadow import ShadowParams, compute_shadow_map, round_half_up

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetMode:
    name: str
    rgb_gsd: float
    lidar_gsd: float
    ratio: int
    patch_rgb: int
    patch_out: int
    low_cut: Optional[float]
    high_cut: float = 100.0

    def __post_init__(self):
        if self.patch_rgb != self.ratio * self.patch_out:
            raise InvalidArgument(
                f"patch_rgb {self.patch_rgb} != ratio {self.ratio} * patch_out {self.patch_out}"
            )
        if not math.isclose(self.lidar_gsd, self.ratio * self.rgb_gsd):
            raise InvalidArgument("lidar_gsd must equal ratio * rgb_gsd")


MANCHESTER = DatasetMode("manchester_buildings", 0.25, 1.0, 4, 256, 64, low_cut=1.5)
DFC = DatasetMode("dfc_full", 0.05, 0.5, 10, 520, 52, low_cut=None)
SYNTHETIC = DatasetMode("synthetic", 0.25, 1.0, 4, 64, 16, low_cut=None)
MODES = {m.name: m for m in (MANCHESTER, DFC, SYNTHETIC)}


def mode_for_preset(preset: str) -> DatasetMode:
    return {"manchester": MANCHESTER, "dfc": DFC, "reduced": SYNTHETIC, "micro": SYNTHETIC}[preset]


# --------------------------------------------------------------------------
# ground truth and validation


def compute_height_ground_truth(dsm: RasterGrid, dtm: RasterGrid, mode: DatasetMode) -> RasterGrid:
    """Object height above ground: DSM - DTM, negatives clamped, low values zeroed."""
    if dsm.shape != dtm.shape:
        raise InvalidArgument(f"DSM {dsm.shape} and DTM {dtm.shape} differ in size")
    if not math.isclose(dsm.gsd, dtm.gsd):
        raise InvalidArgument(f"DSM gsd {dsm.gsd} != DTM gsd {dtm.gsd}")
    valid = dsm.valid_mask & dtm.valid_mask
    h = np.where(valid, dsm.values.astype(np.float64) - dtm.values, 0.0)
    h = np.maximum(h, 0.0)
    if mode.low_cut is not None:
        h = np.where(h < mode.low_cut, 0.0, h)
    return RasterGrid(h.astype(np.float32), valid, dsm.gsd, dsm.origin)


def validate_patch(h: RasterGrid, mode: DatasetMode) -> Optional[str]:
    """Reject reason for a target patch (``"nodata"`` or ``"extreme"``), or None if usable."""
    if not h.valid_mask.all():
        return "nodata"
    if np.any(h.values > mode.high_cut):
        return "extreme"
    return None


# --------------------------------------------------------------------------
# catalog


@dataclass
class PatchRecord:
    id: int
    source_id: str
    offset: Tuple[int, int]
    valid: bool
    reject_reason: Optional[str] = None
    split: Optional[str] = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["offset"] = list(self.offset)
        return d

    @classmethod
    def from_json(cls, d) -> "PatchRecord":
        return cls(**dict(d, offset=tuple(d["offset"])))


@dataclass
class PatchCatalog:
    """Patch records plus the in-memory pixels of every valid patch.

    ``patches`` maps record id to ``(rgb uint8 HxWx3, target RasterGrid)``.
    """

    mode: DatasetMode
    records: List[PatchRecord] = field(default_factory=list)
    patches: Dict[int, Tuple[np.ndarray, RasterGrid]] = field(default_factory=dict)
    storage_root: Optional[Path] = None

    def __len__(self):
        return len(self.records)

    @property
    def valid_records(self) -> List[PatchRecord]:
        return [r for r in self.records if r.valid]

    def split_records(self, split: str) -> List[PatchRecord]:
        return [r for r in self.records if r.valid and r.split == split]

    def split_sizes(self) -> Dict[str, int]:
        return {s: len(self.split_records(s)) for s in SPLITS}

    def sample(self, rec: PatchRecord) -> PatchSample:
        rgb, target = self.patches[rec.id]
        return PatchSample(
            rgb=RgbImage(rgb), target=target, source_id=rec.source_id,
            offset=rec.offset, split=rec.split, valid=rec.valid,
        )

    def targets(self, split: str) -> np.ndarray:
        """All valid target pixels of a split, flattened."""
        vals = [self.patches[r.id][1] for r in self.split_records(split)]
        if not vals:
            return np.zeros(0, np.float32)
        return np.concatenate([g.values[g.valid_mask] for g in vals])


def build_catalog(
    rgb: RgbImage,
    dsm: RasterGrid,
    dtm: RasterGrid,
    mode: DatasetMode,
    stride: Optional[int] = None,
    source_id: str = "source0",
    first_id: int = 0,
) -> PatchCatalog:
    """Walk the RGB raster row-major in ``stride`` steps, validating every patch."""
    stride = mode.patch_rgb if stride is None else int(stride)
    r = mode.ratio
    if stride < 1 or stride % r:
        raise InvalidArgument(f"stride must be a positive multiple of the ratio {r}, got {stride}")
    H, W = rgb.shape
    if (H, W) != (r * dsm.height, r * dsm.width):
        raise InvalidArgument(
            f"RGB {H}x{W} is not {r}x the elevation grid {dsm.height}x{dsm.width}"
        )
    heights = compute_height_ground_truth(dsm, dtm, mode)
    cat = PatchCatalog(mode)
    P, p = mode.patch_rgb, mode.patch_out
    next_id = first_id
    for top in range(0, H - P + 1, stride):
        for left in range(0, W - P + 1, stride):
            target = crop(heights, (top // r, left // r, p, p))
            reason = validate_patch(target, mode)
            rec = PatchRecord(next_id, source_id, (top, left), reason is None, reason)
            if rec.valid:
                cat.patches[rec.id] = (crop(rgb, (top, left, P, P)).data, target)
            cat.records.append(rec)
            next_id += 1
    return cat


def merge_catalogs(catalogs: Sequence[PatchCatalog]) -> PatchCatalog:
    if not catalogs:
        raise EmptyInput("no catalogs to merge")
    out = PatchCatalog(catalogs[0].mode)
    for c in catalogs:
        if c.mode != out.mode:
            raise InvalidArgument("cannot merge catalogs of different dataset modes")
        for rec in c.records:
            new = replace(rec, id=len(out.records))
            if rec.valid:
                out.patches[new.id] = c.patches[rec.id]
            out.records.append(new)
    return out


def split_sizes(n: int, ratios=(0.70, 0.15, 0.15)) -> Tuple[int, int, int]:
    n_val = int(round_half_up(ratios[1] * n + 1e-9))
    n_test = int(round_half_up(ratios[2] * n + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split_catalog(catalog: PatchCatalog, seed: int, ratios=(0.70, 0.15, 0.15)) -> PatchCatalog:
    """Assign train/val/test to valid records; invalid records never get a split."""
    if len(ratios) != 3 or any(x < 0 for x in ratios) or not math.isclose(sum(ratios), 1.0):
        raise InvalidArgument(f"split ratios must be three nonnegatives summing to 1, got {ratios}")
    valid = catalog.valid_records
    if not valid:
        raise EmptyInput("catalog has no valid patches to split")
    n_train, n_val, _ = split_sizes(len(valid), ratios)
    order = np.random.default_rng(seed).permutation(len(valid))
    assign = {}
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        assign[valid[idx].id] = split
    records = [replace(r, split=assign.get(r.id)) for r in catalog.records]
    return replace(catalog, records=records)


# --------------------------------------------------------------------------
# persistence


def _patch_paths(root: Path, rid: int) -> Tuple[Path, Path]:
    return root / "patches" / f"{rid:06d}_rgb.png", root / "patches" / f"{rid:06d}_height.tif"


def save_catalog(catalog: PatchCatalog, root) -> Path:
    """Write ``manifest.json`` plus one PNG (RGB) and one float TIFF (height) per valid patch."""
    root = Path(root)
    (root / "patches").mkdir(parents=True, exist_ok=True)
    gsd = None
    for rec in catalog.records:
        if not rec.valid:
            continue
        rgb, target = catalog.patches[rec.id]
        rgb_path, h_path = _patch_paths(root, rec.id)
        Image.fromarray(rgb, "RGB").save(rgb_path)
        vals = np.where(target.valid_mask, target.values, np.nan).astype(np.float32)
        tifffile.imwrite(h_path, vals, compression="zlib")
        gsd = target.gsd
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "mode": asdict(catalog.mode),
        "target_gsd": gsd if gsd is not None else catalog.mode.lidar_gsd,
        "records": [r.to_json() for r in catalog.records],
    }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(root / "manifest.json")
    catalog.storage_root = root
    return root / "manifest.json"


def load_catalog(root) -> PatchCatalog:
    root = Path(root)
    path = root / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: cannot read manifest ({e})") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema_version {manifest.get('schema_version')!r}")
    mode = DatasetMode(**manifest["mode"])
    cat = PatchCatalog(mode, storage_root=root)
    gsd = manifest["target_gsd"]
    for d in manifest["records"]:
        rec = PatchRecord.from_json(d)
        if rec.valid:
            rgb_path, h_path = _patch_paths(root, rec.id)
            try:
                rgb = np.asarray(Image.open(rgb_path).convert("RGB"))
                vals = tifffile.imread(h_path)
            except (OSError, ValueError) as e:
                raise DataError(f"patch {rec.id}: {e}") from e
            cat.patches[rec.id] = (rgb, RasterGrid.from_array(vals, gsd))
        cat.records.append(rec)
    return cat


# --------------------------------------------------------------------------
# augmentation and batch assembly


@dataclass(frozen=True)
class AugmentConfig:
    rotate: bool = True
    color_shift: float = 10.0  # max absolute per-channel additive shift; 0 disables
    contrast: Tuple[float, float] = (0.9, 1.1)  # (1, 1) disables

    @property
    def enabled(self) -> bool:
        return self.rotate or self.color_shift > 0 or tuple(self.contrast) != (1.0, 1.0)


NO_AUGMENT = AugmentConfig(rotate=False, color_shift=0.0, contrast=(1.0, 1.0))


def augment_sample(s: PatchSample, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> PatchSample:
    """Random quarter-turn of RGB and target together, then photometric jitter of RGB only.

    The returned sample carries no shadow map; it must be recomputed from
    the augmented pixels.
    """
    if not config.enabled:
        return s
    rgb, target = s.rgb, s.target
    if config.rotate:
        k = int(rng.integers(0, 4))
        rgb, target = rotate90(rgb, k), rotate90(target, k)
    lo, hi = config.contrast
    if config.color_shift > 0 or (lo, hi) != (1.0, 1.0):
        x = rgb.data.astype(np.float64)
        if (lo, hi) != (1.0, 1.0):
            f = rng.uniform(lo, hi)
            mean = x.mean(axis=(0, 1), keepdims=True)
            x = (x - mean) * f + mean
        if config.color_shift > 0:
            x = x + rng.uniform(-config.color_shift, config.color_shift, size=3)
        rgb = RgbImage(np.clip(round_half_up(x), 0, 255).astype(np.uint8), rgb.gsd)
    return replace(s, rgb=rgb, target=target, shadow=None)


def assemble_input(rgb, params: ShadowParams = ShadowParams(), use_shadow: bool = True) -> np.ndarray:
    """Stack (R, G, B[, shadow]) as float32 HxWxC; RGB stays in [0, 255]."""
    data = rgb.data if isinstance(rgb, RgbImage) else np.asarray(rgb, dtype=np.uint8)
    x = data.astype(np.float32)
    if not use_shadow:
        return x
    shadow = compute_shadow_map(data, params).data.astype(np.float32)
    return np.concatenate([x, shadow[..., None]], axis=2)


@dataclass
class Batch:
    x: np.ndarray  # B x H x W x C float32
    y: np.ndarray  # B x h x w x 1 float32
    mask: np.ndarray  # B x h x w x 1 bool
    ids: List[int]


def sample_rng(seed: int, epoch: int, record_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch), int(record_id)])


def epoch_order(records: Sequence[PatchRecord], seed: int, epoch: int, shuffle: bool) -> List[PatchRecord]:
    records = list(records)
    if shuffle:
        perm = np.random.default_rng([int(seed), int(epoch), 2**31 - 1]).permutation(len(records))
        records = [records[i] for i in perm]
    return records


def iter_batches(
    catalog: PatchCatalog,
    split: str,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    augment: AugmentConfig = NO_AUGMENT,
    shadow_params: ShadowParams = ShadowParams(),
    use_shadow: bool = True,
    shuffle: bool = False,
    workers: int = 0,
) -> Iterator[Batch]:
    """Yield batches of a split.

    Each sample's augmentation is driven by its own generator seeded from
    ``(seed, epoch, record id)``, so the batch sequence is identical for any
    number of ``workers``.
    """
    if batch_size < 1:
        raise InvalidArgument("batch_size must be >= 1")
    records = epoch_order(catalog.split_records(split), seed, epoch, shuffle)

    def prepare(rec: PatchRecord):
        s = catalog.sample(rec)
        s = augment_sample(s, sample_rng(seed, epoch, rec.id), augment)
        x = assemble_input(s.rgb, shadow_params, use_shadow)
        return x, s.target.values, s.target.valid_mask

    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    try:
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            items = list(pool.map(prepare, chunk)) if pool else [prepare(r) for r in chunk]
            x = np.stack([it[0] for it in items])
            mask = np.stack([it[2] for it in items])[..., None]
            y = np.where(mask, np.stack([it[1] for it in items])[..., None], 0.0).astype(np.float32)
            yield Batch(x, y, mask, [r.id for r in chunk])
    finally:
        if pool:
            pool.shutdown()

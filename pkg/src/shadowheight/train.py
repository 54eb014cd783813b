"""Training: masked MAE loss, Adam, reduce-on-plateau, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .datapipe import AugmentConfig, PatchCatalog, iter_batches
from .errors import CheckpointError, EmptyInput, InvalidArgument, TrainingDiverged
from .net import ArchitectureSpec, HeightNet, nhwc_to_tensor
from .shadow import ShadowParams

log = logging.getLogger(__name__)

MAGIC = b"SHHT"
FORMAT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-6
    batch_size: int = 32
    max_epochs: int = 50
    seed: int = 0
    use_shadow_channel: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 1
    workers: int = 0

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise InvalidArgument(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if not self.lr0 > 0:
            raise InvalidArgument(f"lr0 must be positive, got {self.lr0}")
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in self.augment.items()})


DEFAULT_BATCH = {"manchester": 8, "dfc": 2, "micro": 32, "reduced": 32}


# --------------------------------------------------------------------------
# loss and optimisation step


def mae_loss(pred, target, mask=None):
    """Mean |pred - target| over valid pixels; works on tensors or arrays."""
    as_numpy = not isinstance(pred, torch.Tensor)
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise InvalidArgument(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if mask is None:
        mask = torch.ones(pred.shape, dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    n = int(mask.sum())
    if n == 0:
        raise EmptyInput("no valid pixels in loss")
    diff = torch.where(mask, (pred - target).abs(), torch.zeros((), dtype=pred.dtype))
    loss = diff.sum() / n
    return float(loss) if as_numpy else loss


def make_optimizer(model: HeightNet, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def train_step(model: HeightNet, batch, optimizer: torch.optim.Optimizer, lr: float) -> float:
    """One Adam update on the masked MAE of ``batch``; returns the pre-update loss."""
    for g in optimizer.param_groups:
        g["lr"] = lr
    model.train()
    x = nhwc_to_tensor(batch.x)
    y = torch.as_tensor(batch.y).permute(0, 3, 1, 2)
    m = torch.as_tensor(batch.mask).permute(0, 3, 1, 2)
    optimizer.zero_grad(set_to_none=True)
    loss = mae_loss(model(x), y, m)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"loss became {float(loss.detach())}")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5, min_lr: float = 1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "best": self.best if math.isfinite(self.best) else None,
                "bad_epochs": self.bad_epochs}

    def load_state_dict(self, d: dict) -> None:
        self.lr = d["lr"]
        self.best = math.inf if d["best"] is None else d["best"]
        self.bad_epochs = d["bad_epochs"]


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    spec: ArchitectureSpec
    params: Dict[str, np.ndarray]  # model state incl. batch-norm running stats
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)  # "m.<p>", "v.<p>"
    adam_step: int = 0
    epoch: int = 0  # epochs completed
    seed: int = 0
    schedule: dict = field(default_factory=dict)
    history: List[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    best_val_mae: Optional[float] = None
    format_version: int = FORMAT_VERSION


def _state_arrays(model: HeightNet) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32).copy() for k, v in model.state_dict().items()}


def _optimizer_arrays(model: HeightNet, opt: Optional[torch.optim.Optimizer]) -> Tuple[Dict[str, np.ndarray], int]:
    out, step = {}, 0
    if opt is None:
        return out, step
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        out["m." + name] = st["exp_avg"].detach().numpy().copy()
        out["v." + name] = st["exp_avg_sq"].detach().numpy().copy()
        step = int(st["step"])
    return out, step


def make_checkpoint(model, optimizer=None, **kw) -> Checkpoint:
    opt_arrays, step = _optimizer_arrays(model, optimizer)
    return Checkpoint(model.spec, _state_arrays(model), opt_arrays, step, **kw)


def model_from_checkpoint(ckpt: Checkpoint) -> HeightNet:
    model = HeightNet(ckpt.spec)
    state = model.state_dict()
    missing = set(state) - set(ckpt.params)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:3]}...")
    model.load_state_dict(
        {k: torch.from_numpy(ckpt.params[k]).to(state[k].dtype) for k in state}
    )
    model.eval()
    return model


def optimizer_from_checkpoint(model: HeightNet, ckpt: Checkpoint, lr: float) -> torch.optim.Adam:
    opt = make_optimizer(model, lr)
    if not ckpt.optimizer:
        return opt
    for name, p in model.named_parameters():
        if "m." + name in ckpt.optimizer:
            opt.state[p] = {
                "step": torch.tensor(float(ckpt.adam_step)),
                "exp_avg": torch.from_numpy(ckpt.optimizer["m." + name].copy()),
                "exp_avg_sq": torch.from_numpy(ckpt.optimizer["v." + name].copy()),
            }
    return opt


def _pack_tensor(name: str, a: np.ndarray) -> bytes:
    nb = name.encode()
    a = np.ascontiguousarray(a, dtype="<f4")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialise: magic, u32 version, u32 + JSON header, u32 tensor count,
    (name, shape, little-endian float32 data) per tensor, u32 CRC-32 trailer."""
    meta = {
        "spec": ckpt.spec.to_dict(),
        "adam_step": ckpt.adam_step,
        "epoch": ckpt.epoch,
        "rng": {"seed": ckpt.seed, "next_epoch": ckpt.epoch},
        "schedule": ckpt.schedule,
        "history": ckpt.history,
        "config": ckpt.config,
        "best_val_mae": ckpt.best_val_mae,
    }
    mb = json.dumps(meta, sort_keys=True).encode()
    tensors = [("param." + k, v) for k, v in ckpt.params.items()]
    tensors += [("adam." + k, v) for k, v in ckpt.optimizer.items()]
    body = MAGIC + struct.pack("<II", ckpt.format_version, len(mb)) + mb
    body += struct.pack("<I", len(tensors)) + b"".join(_pack_tensor(n, a) for n, a in tensors)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write (temp file in the target directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e}") from e
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    try:
        meta = json.loads(r.take(r.u32()).decode())
        params, opt = {}, {}
        for _ in range(r.u32()):
            name = r.take(r.u32()).decode()
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            n = int(np.prod(shape, dtype=np.int64))
            a = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
            group, _, key = name.partition(".")
            (params if group == "param" else opt)[key] = a
        if r.pos != len(body):
            raise CheckpointError("trailing bytes after tensor table")
        spec = ArchitectureSpec.from_dict(meta["spec"])
    except (KeyError, ValueError, TypeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e
    return Checkpoint(
        spec, params, opt, meta["adam_step"], meta["epoch"], meta["rng"]["seed"],
        meta["schedule"], meta["history"], meta["config"], meta["best_val_mae"], version,
    )


# --------------------------------------------------------------------------
# training loop


def predict_split(model: HeightNet, catalog: PatchCatalog, split: str, shadow_params: ShadowParams,
                  use_shadow: bool, batch_size: int = 32):
    """Yield (clamped eval-mode prediction, target, mask) batches for a split."""
    model.eval()
    with torch.no_grad():
        for b in iter_batches(catalog, split, batch_size, shadow_params=shadow_params,
                              use_shadow=use_shadow):
            pred = model(nhwc_to_tensor(b.x)).permute(0, 2, 3, 1).numpy()
            yield np.maximum(pred, 0.0), b.y, b.mask, b.ids


def split_mae(model, catalog, split, shadow_params, use_shadow, batch_size=32) -> float:
    total, n = 0.0, 0
    for pred, y, mask, _ in predict_split(model, catalog, split, shadow_params, use_shadow, batch_size):
        total += float(np.abs(pred - y)[mask].astype(np.float64).sum())
        n += int(mask.sum())
    if n == 0:
        raise EmptyInput(f"split {split!r} has no valid pixels")
    return total / n


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["augment"] = asdict(config.augment)
    return d


def fit(
    model: HeightNet,
    catalog: PatchCatalog,
    config: TrainConfig,
    shadow_params: ShadowParams = ShadowParams(),
    checkpoint_dir=None,
    resume: Optional[Checkpoint] = None,
    stop_after: Optional[int] = None,
) -> Tuple[Checkpoint, List[dict]]:
    """Train with per-epoch validation; returns the best-validation checkpoint and history.

    ``resume`` continues a run from a saved checkpoint (parameters, optimiser
    moments, schedule and history).  ``stop_after`` ends the run after that
    many epochs in total, as if interrupted.
    """
    expected_ch = 4 if config.use_shadow_channel else 3
    if model.spec.input_channels != expected_ch:
        raise InvalidArgument(
            f"model takes {model.spec.input_channels} channels but use_shadow_channel="
            f"{config.use_shadow_channel}"
        )
    sizes = catalog.split_sizes()
    if sizes["train"] == 0 or sizes["val"] == 0:
        raise EmptyInput(f"need nonempty train and val splits, got {sizes}")

    sched = PlateauSchedule(config.lr0, config.plateau_factor, config.plateau_patience, config.min_lr)
    cfg = _config_dict(config)
    if resume is not None:
        state = model_from_checkpoint(resume).state_dict()
        model.load_state_dict(state)
        opt = optimizer_from_checkpoint(model, resume, sched.lr)
        sched.load_state_dict(resume.schedule)
        history = list(resume.history)
        start = resume.epoch
        best_val = resume.best_val_mae if resume.best_val_mae is not None else math.inf
        best = None
        if checkpoint_dir is not None and (Path(checkpoint_dir) / "best.ckpt").exists():
            best = load_checkpoint(Path(checkpoint_dir) / "best.ckpt")
    else:
        opt = make_optimizer(model, sched.lr)
        history, start, best_val, best = [], 0, math.inf, None

    if best is None:
        best = make_checkpoint(model, opt, epoch=start, seed=config.seed,
                               schedule=sched.state_dict(), history=list(history), config=cfg)

    end = config.max_epochs if stop_after is None else min(config.max_epochs, stop_after)
    use_shadow = config.use_shadow_channel
    for epoch in range(start, end):
        lr = sched.lr
        total, n = 0.0, 0
        for batch in iter_batches(catalog, "train", config.batch_size, seed=config.seed, epoch=epoch,
                                  augment=config.augment, shadow_params=shadow_params,
                                  use_shadow=use_shadow, shuffle=True, workers=config.workers):
            loss = train_step(model, batch, opt, lr)
            k = int(batch.mask.sum())
            total += loss * k
            n += k
        val = split_mae(model, catalog, "val", shadow_params, use_shadow, config.batch_size)
        sched.step(val)
        history.append({"epoch": epoch + 1, "train_mae": total / n, "val_mae": val, "lr": lr})
        log.info("epoch %d train %.4f val %.4f lr %.2e", epoch + 1, total / n, val, lr)
        improved = val < best_val
        if improved:
            best_val = val
        ckpt = make_checkpoint(model, opt, epoch=epoch + 1, seed=config.seed,
                               schedule=sched.state_dict(), history=list(history), config=cfg,
                               best_val_mae=best_val)
        if improved:
            best = ckpt
        if checkpoint_dir is not None:
            if improved:
                save_checkpoint(ckpt, Path(checkpoint_dir) / "best.ckpt")
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(ckpt, Path(checkpoint_dir) / "last.ckpt")
    best.history = list(history)
    return best, history

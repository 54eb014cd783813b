"""Sliding-mask sensitivity probe.

A square mask is slid over the model input; under the mask either the RGB
channels are blacked out / brightened or the shadow channel is forced on /
off.  Each position yields a delta map ``forward(masked) - forward(input)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage
import torch

from .errors import InvalidArgument
from .net import HeightNet, check_input, nhwc_to_tensor

TARGETS = ("rgb_zero", "shadow_one", "shadow_zero", "rgb_brighten")
AGGREGATES = ("max_abs", "mean")


@dataclass(frozen=True)
class ProbeConfig:
    mask_size: int = 32
    stride: int = 32
    target: str = "shadow_one"
    aggregate: str = "max_abs"
    brighten_level: float = 200.0

    def __post_init__(self):
        if self.mask_size < 0:
            raise InvalidArgument("mask_size must be >= 0")
        if self.stride < 1:
            raise InvalidArgument("stride must be >= 1")
        if self.target not in TARGETS:
            raise InvalidArgument(f"target must be one of {TARGETS}")
        if self.aggregate not in AGGREGATES:
            raise InvalidArgument(f"aggregate must be one of {AGGREGATES}")


def apply_mask(x: np.ndarray, rect: Tuple[int, int, int, int], target: str,
               brighten_level: float = 200.0) -> np.ndarray:
    """Return a copy of the HxWxC input with ``rect = (top, left, h, w)`` overwritten."""
    x = np.asarray(x)
    H, W, C = x.shape
    top, left, h, w = rect
    if top < 0 or left < 0 or h < 0 or w < 0 or top + h > H or left + w > W:
        raise InvalidArgument(f"mask {rect} outside {H}x{W} input")
    if target not in TARGETS:
        raise InvalidArgument(f"unknown mask target {target!r}")
    if target.startswith("shadow") and C < 4:
        raise InvalidArgument("shadow-channel masks need a 4-channel input")
    out = x.copy()
    win = out[top : top + h, left : left + w]
    if target == "rgb_zero":
        win[..., :3] = 0
    elif target == "rgb_brighten":
        win[..., :3] = np.maximum(win[..., :3], brighten_level)
    elif target == "shadow_one":
        win[..., 3] = 1
    else:
        win[..., 3] = 0
    return out


def mask_positions(size: int, mask_size: int, stride: int) -> List[Tuple[int, int]]:
    """Row-major top-left corners of every mask placement that fits the patch."""
    starts = range(0, size - max(mask_size, 1) + 1, stride)
    return [(t, l) for t in starts for l in starts]


@dataclass
class SweepResult:
    positions: List[Tuple[int, int]]
    deltas: np.ndarray  # n_positions x h x w
    aggregate: np.ndarray  # h x w
    baseline: np.ndarray  # h x w
    config: ProbeConfig

    def position_scores(self) -> np.ndarray:
        """Max |delta| per position."""
        if not len(self.deltas):
            return np.zeros(0)
        return np.abs(self.deltas).reshape(len(self.deltas), -1).max(axis=1)

    def position_grid(self) -> np.ndarray:
        """Per-position scores laid out on the stride grid."""
        n = int(round(np.sqrt(len(self.positions))))
        return self.position_scores().reshape(n, n)

    def summary(self) -> dict:
        scores = self.position_scores()
        best = int(np.argmax(scores)) if len(scores) else None
        return {
            "schema_version": 1,
            "config": asdict(self.config),
            "n_positions": len(self.positions),
            "positions": [
                {"top": t, "left": l, "max_abs_delta": float(s)}
                for (t, l), s in zip(self.positions, scores)
            ],
            "argmax": None if best is None else {
                "top": self.positions[best][0], "left": self.positions[best][1],
                "max_abs_delta": float(scores[best]),
            },
        }


def _run(model: HeightNet, xs: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return model(nhwc_to_tensor(xs))[:, 0].numpy()


def sensitivity_sweep(model: HeightNet, x: np.ndarray, config: ProbeConfig = ProbeConfig(),
                      batch_size: int = 1) -> SweepResult:
    x = np.asarray(x, dtype=np.float32)
    check_input(model, (1,) + x.shape)
    model.eval()
    baseline = _run(model, x[None])[0]
    positions = mask_positions(x.shape[0], config.mask_size, config.stride)
    m = config.mask_size
    deltas = np.zeros((len(positions),) + baseline.shape, np.float32)
    pending = []
    for i, (t, l) in enumerate(positions):
        masked = apply_mask(x, (t, l, m, m), config.target, config.brighten_level)
        # an unchanged input has an exactly-zero delta; skip the forward
        if not np.array_equal(masked, x):
            pending.append((i, masked))
    for j in range(0, len(pending), batch_size):
        chunk = pending[j : j + batch_size]
        out = _run(model, np.stack([c[1] for c in chunk]))
        for (i, _), o in zip(chunk, out):
            deltas[i] = o - baseline
    if config.aggregate == "max_abs":
        agg = np.abs(deltas).max(axis=0) if len(deltas) else np.zeros_like(baseline)
    else:
        agg = deltas.mean(axis=0) if len(deltas) else np.zeros_like(baseline)
    return SweepResult(positions, deltas, agg, baseline, config)


def classify_positions(building: np.ndarray, positions, mask_size: int,
                       near_px: int) -> List[str]:
    """Label each mask as ``"adjacent"`` (no overlap with a building but within
    ``near_px`` of one), ``"empty"`` (no building within ``near_px``) or
    ``"overlap"``."""
    building = np.asarray(building, bool)
    near = ndimage.binary_dilation(building, iterations=near_px) if near_px > 0 else building
    labels = []
    for t, l in positions:
        win = (slice(t, t + mask_size), slice(l, l + mask_size))
        if building[win].any():
            labels.append("overlap")
        elif near[win].any():
            labels.append("adjacent")
        else:
            labels.append("empty")
    return labels

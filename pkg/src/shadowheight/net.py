"""Residual encoder-decoder for heightmap regression.

The network is described declaratively by an :class:`ArchitectureSpec`
(an ordered list of named blocks, each reading one or two earlier taps) and
realised as a torch module.  Tensors inside the module are NCHW; the public
:func:`forward` helper takes and returns channels-last arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument, SpecError

BLOCK_KINDS = ("Conv", "BN", "BNAct", "RBLK", "DRBLK", "URBLK")
INPUT_TAP = "x"


# --------------------------------------------------------------------------
# sub-pixel rearrangement


def pixel_shuffle(x: np.ndarray, s: int) -> np.ndarray:
    """Rearrange ``(..., h, w, s*s*c)`` into ``(..., s*h, s*w, c)``.

    Input channel ``c*s*s + dy*s + dx`` of pixel ``(i, j)`` goes to output
    pixel ``(s*i + dy, s*j + dx)``, channel ``c``.
    """
    x = np.asarray(x)
    if s < 1:
        raise InvalidArgument(f"scale must be >= 1, got {s}")
    *lead, h, w, cs = x.shape
    if cs % (s * s):
        raise InvalidArgument(f"{cs} channels not divisible by s^2={s * s}")
    c = cs // (s * s)
    n = len(lead)
    y = x.reshape(*lead, h, w, c, s, s)
    y = y.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return np.ascontiguousarray(y.reshape(*lead, h * s, w * s, c))


def pixel_unshuffle(x: np.ndarray, s: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle`."""
    x = np.asarray(x)
    *lead, H, W, c = x.shape
    if H % s or W % s:
        raise InvalidArgument(f"spatial dims {H}x{W} not divisible by {s}")
    n = len(lead)
    y = x.reshape(*lead, H // s, s, W // s, s, c)
    y = y.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return np.ascontiguousarray(y.reshape(*lead, H // s, W // s, c * s * s))


def pixel_shuffle_nchw(x: torch.Tensor, s: int) -> torch.Tensor:
    n, cs, h, w = x.shape
    if cs % (s * s):
        raise InvalidArgument(f"{cs} channels not divisible by s^2={s * s}")
    c = cs // (s * s)
    y = x.reshape(n, c, s, s, h, w).permute(0, 1, 4, 2, 5, 3)
    return y.reshape(n, c, h * s, w * s)


# --------------------------------------------------------------------------
# architecture description


@dataclass(frozen=True)
class BlockSpec:
    name: str
    kind: str
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: str = "same"
    inputs: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_size: int
    input_channels: int
    blocks: Tuple[BlockSpec, ...]
    output_size: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [dict(b, inputs=list(b["inputs"])) for b in d["blocks"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        blocks = tuple(BlockSpec(**dict(b, inputs=tuple(b["inputs"]))) for b in d["blocks"])
        return cls(d["name"], d["input_size"], d["input_channels"], blocks, d["output_size"])

    def infer_shapes(self) -> Dict[str, Tuple[int, int]]:
        """Map each tap to its (spatial size, channels), validating as we go."""
        shapes = {INPUT_TAP: (self.input_size, self.input_channels)}
        prev = INPUT_TAP
        for b in self.blocks:
            if b.kind not in BLOCK_KINDS:
                raise SpecError(b.name, f"unknown kind {b.kind!r}")
            if b.name in shapes:
                raise SpecError(b.name, "duplicate block name")
            inputs = b.inputs or (prev,)
            if not 1 <= len(inputs) <= 2:
                raise SpecError(b.name, "takes one or two inputs")
            for t in inputs:
                if t not in shapes:
                    raise SpecError(b.name, f"unknown input tap {t!r}")
            sizes = {shapes[t][0] for t in inputs}
            if len(sizes) != 1:
                raise SpecError(b.name, f"concatenated inputs differ in size: {sorted(sizes)}")
            size = sizes.pop()
            c_in = sum(shapes[t][1] for t in inputs)
            if b.kind in ("BN", "BNAct"):
                shapes[b.name] = (size, c_in)
            else:
                if b.out_channels < 1:
                    raise SpecError(b.name, "out_channels must be positive")
                if b.kind == "Conv":
                    out = _conv_out(size, b.kernel, b.stride, b.padding)
                elif b.kind == "RBLK":
                    out = size
                elif b.kind == "DRBLK":
                    out = _conv_out(size, b.kernel, 2, "same")
                else:
                    out = 2 * size
                if out < 1:
                    raise SpecError(b.name, f"spatial size collapses to {out}")
                shapes[b.name] = (out, b.out_channels)
            prev = b.name
        final = shapes[prev]
        if final[0] != self.output_size or final[1] != 1:
            raise SpecError(
                prev, f"network ends at {final}, expected ({self.output_size}, 1)"
            )
        return shapes


def _conv_out(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return (size + 2 * (k // 2) - k) // stride + 1
    if padding == "valid":
        return (size - k) // stride + 1
    raise InvalidArgument(f"unknown padding {padding!r}")


def _scaled(c: int, width: float) -> int:
    return max(1, int(round(c * width)))


def _trunk(widths: Sequence[int], width: float) -> List[BlockSpec]:
    """Shared encoder/decoder body from RBLK1 to the last decoder block."""
    (c1, c2, c3, c4, c5, c6, c7, u1, r8, u2, r9, r10, r11) = [
        _scaled(c, width) for c in widths[:13]
    ]
    r12 = _scaled(widths[13], width) if widths[13] else 0
    blocks = [
        BlockSpec("RBLK1", "RBLK", c1),
        BlockSpec("DRBLK1", "DRBLK", c1, stride=2),
        BlockSpec("RBLK2", "RBLK", c2),
        BlockSpec("DRBLK2", "DRBLK", c3, stride=2),
        BlockSpec("RBLK3", "RBLK", c3),
        BlockSpec("DRBLK3", "DRBLK", c4, stride=2),
        BlockSpec("RBLK4", "RBLK", c4),
        BlockSpec("DRBLK4", "DRBLK", c5, stride=2),
        BlockSpec("RBLK5", "RBLK", c5),
        BlockSpec("RBLK6", "RBLK", c6),
        BlockSpec("RBLK7", "RBLK", c7),
        BlockSpec("URBLK1", "URBLK", u1, inputs=("RBLK7", "RBLK5")),
        BlockSpec("RBLK8", "RBLK", r8),
        BlockSpec("URBLK2", "URBLK", u2, inputs=("RBLK8", "RBLK4")),
        BlockSpec("RBLK9", "RBLK", r9),
        BlockSpec("RBLK10", "RBLK", r10, inputs=("RBLK9", "RBLK3")),
        BlockSpec("RBLK11", "RBLK", r11),
    ]
    if r12:
        blocks.append(BlockSpec("RBLK12", "RBLK", r12))
    return blocks


def manchester_spec(
    width: float = 1.0, input_size: int = 256, input_channels: int = 4, name: str = "manchester"
) -> ArchitectureSpec:
    """Ratio-4 network: 256 -> 64 at full width."""
    c = lambda v: _scaled(v, width)
    blocks = [
        BlockSpec("BN1", "BN", inputs=(INPUT_TAP,)),
        BlockSpec("Conv1", "Conv", c(64)),
        BlockSpec("BN2", "BNAct"),
        *_trunk((64, 64, 128, 256, 512, 1024, 1024, 512, 512, 256, 256, 128, 128, 64), width),
        BlockSpec("Conv2", "Conv", c(64)),
        BlockSpec("BN3", "BNAct"),
        BlockSpec("Conv3", "Conv", 1),
    ]
    return ArchitectureSpec(name, input_size, input_channels, tuple(blocks), input_size // 4)


def dfc_spec(width: float = 1.0, input_channels: int = 4, name: str = "dfc") -> ArchitectureSpec:
    """Ratio-10 network: 520 -> 52 through a strided valid stem and a valid-padded tail."""
    c = lambda v: _scaled(v, width)
    blocks = [
        BlockSpec("BN1", "BN", inputs=(INPUT_TAP,)),
        BlockSpec("Conv1", "Conv", c(64), kernel=10, stride=2, padding="valid"),
        BlockSpec("BN2", "BNAct"),
        *_trunk((64, 64, 128, 192, 256, 256, 512, 256, 256, 192, 128, 64, 64, 0), width),
        BlockSpec("Conv2", "Conv", c(64), kernel=5, padding="valid"),
        BlockSpec("BN3", "BNAct"),
        BlockSpec("Conv3", "Conv", c(64), kernel=5, padding="valid"),
        BlockSpec("BN4", "BNAct"),
        BlockSpec("Conv4", "Conv", c(32), kernel=3, padding="valid"),
        BlockSpec("BN5", "BNAct"),
        BlockSpec("Conv5", "Conv", 1, kernel=3, padding="valid"),
    ]
    return ArchitectureSpec(name, 520, input_channels, tuple(blocks), 52)


PRESETS = ("manchester", "dfc", "reduced", "micro")


def preset(name: str, use_shadow: bool = True) -> ArchitectureSpec:
    ch = 4 if use_shadow else 3
    if name == "manchester":
        return manchester_spec(input_channels=ch)
    if name == "dfc":
        return dfc_spec(input_channels=ch)
    if name == "reduced":
        return manchester_spec(0.25, 64, ch, name="reduced")
    if name == "micro":
        return manchester_spec(0.125, 64, ch, name="micro")
    raise InvalidArgument(f"unknown preset {name!r}; choose from {PRESETS}")


# --------------------------------------------------------------------------
# torch realisation


def _same_pad(k: int) -> int:
    return k // 2


class ResBlock(nn.Module):
    """RBLK / DRBLK / URBLK.

    main: conv -> [shuffle] -> BN -> PReLU -> conv -> BN
    skip: 1x1 conv -> [shuffle]
    out:  PReLU(main + skip)
    """

    def __init__(self, kind: str, c_in: int, c_out: int, kernel: int = 3):
        super().__init__()
        self.kind = kind
        stride = 2 if kind == "DRBLK" else 1
        s2 = 4 if kind == "URBLK" else 1
        p = _same_pad(kernel)
        self.conv1 = nn.Conv2d(c_in, s2 * c_out, kernel, stride=stride, padding=p)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.act1 = nn.PReLU(c_out, init=0.25)
        self.conv2 = nn.Conv2d(c_out, c_out, kernel, padding=p)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = nn.Conv2d(c_in, s2 * c_out, 1, stride=stride)
        self.act_out = nn.PReLU(c_out, init=0.25)

    def forward(self, x):
        up = self.kind == "URBLK"
        h = self.conv1(x)
        if up:
            h = pixel_shuffle_nchw(h, 2)
        h = self.bn2(self.conv2(self.act1(self.bn1(h))))
        s = self.skip(x)
        if up:
            s = pixel_shuffle_nchw(s, 2)
        return self.act_out(h + s)


class BNAct(nn.Module):
    def __init__(self, c: int, act: bool):
        super().__init__()
        self.bn = nn.BatchNorm2d(c)
        self.act = nn.PReLU(c, init=0.25) if act else None

    def forward(self, x):
        x = self.bn(x)
        return self.act(x) if self.act is not None else x


class HeightNet(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        self.shapes = spec.infer_shapes()
        self.layers = nn.ModuleDict()
        self._inputs: Dict[str, Tuple[str, ...]] = {}
        prev = INPUT_TAP
        for b in spec.blocks:
            inputs = b.inputs or (prev,)
            self._inputs[b.name] = inputs
            c_in = sum(self.shapes[t][1] for t in inputs)
            if b.kind in ("BN", "BNAct"):
                layer = BNAct(c_in, act=b.kind == "BNAct")
            elif b.kind == "Conv":
                pad = _same_pad(b.kernel) if b.padding == "same" else 0
                layer = nn.Conv2d(c_in, b.out_channels, b.kernel, stride=b.stride, padding=pad)
            else:
                layer = ResBlock(b.kind, c_in, b.out_channels, b.kernel)
            self.layers[b.name] = layer
            prev = b.name
        self._last = prev
        # taps read later than the next block must be kept alive
        self._keep = {t for ins in self._inputs.values() if len(ins) > 1 for t in ins}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        taps = {INPUT_TAP: x}
        h = x
        for name, layer in self.layers.items():
            inputs = self._inputs[name]
            if len(inputs) == 1:
                inp = taps[inputs[0]]
            else:
                inp = torch.cat([taps[t] for t in inputs], dim=1)
            h = layer(inp)
            taps = {k: v for k, v in taps.items() if k in self._keep}
            taps[name] = h
        return h


def init_he_normal(model: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
                w = torch.randn(m.weight.shape, generator=g, dtype=torch.float32) * std
                m.weight.copy_(w)
                m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()
            elif isinstance(m, nn.PReLU):
                m.weight.fill_(0.25)


def build_model(spec: ArchitectureSpec, seed: int = 0) -> HeightNet:
    model = HeightNet(spec)
    init_he_normal(model, seed)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def check_input(model: HeightNet, batch_shape) -> None:
    spec = model.spec
    if len(batch_shape) != 4:
        raise InvalidArgument(f"expected BxHxWxC batch, got shape {tuple(batch_shape)}")
    _, h, w, c = batch_shape
    if h != spec.input_size or w != spec.input_size:
        raise InvalidArgument(
            f"input {h}x{w} does not match {spec.name} input size {spec.input_size}"
        )
    if c != spec.input_channels:
        raise InvalidArgument(f"input has {c} channels, model expects {spec.input_channels}")


def nhwc_to_tensor(batch) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(batch, dtype=np.float32))
    return t.permute(0, 3, 1, 2).contiguous()


def forward(model: HeightNet, batch, mode: str = "eval") -> np.ndarray:
    """Run ``B x H x W x C`` through the network, returning ``B x h x w x 1``.

    ``mode="eval"`` uses running batch-norm statistics and leaves the model
    untouched; ``mode="train"`` uses batch statistics and updates them.
    """
    if mode not in ("train", "eval"):
        raise InvalidArgument(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = np.asarray(batch, dtype=np.float32)
    check_input(model, batch.shape)
    was_training = model.training
    model.train(mode == "train")
    try:
        with torch.no_grad():
            out = model(nhwc_to_tensor(batch))
    finally:
        model.train(was_training)
    return out.permute(0, 2, 3, 1).numpy()

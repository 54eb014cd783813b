"""YAML run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .datapipe import AugmentConfig
from .errors import InvalidArgument
from .probe import ProbeConfig
from .shadow import ShadowParams
from .synthcity import SceneParams
from .train import TrainConfig


@dataclass
class Paths:
    data_root: Optional[str] = None
    catalog: Optional[str] = None
    checkpoints: Optional[str] = None
    outputs: Optional[str] = None


@dataclass
class AppConfig:
    preset: str = "micro"
    seed: int = 0
    shadow: ShadowParams = field(default_factory=ShadowParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    synth: SceneParams = field(default_factory=SceneParams)


_NESTED = {
    "shadow": ShadowParams, "train": TrainConfig, "paths": Paths,
    "probe": ProbeConfig, "synth": SceneParams, "augment": AugmentConfig,
}


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidArgument(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidArgument(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in _NESTED and dataclasses.is_dataclass(_NESTED[k]):
            v = _build(_NESTED[k], v, f"{where}.{k}")
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise InvalidArgument(f"{where}: {e}") from e


def load_config(path=None) -> AppConfig:
    if path is None:
        return AppConfig()
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise InvalidArgument(f"cannot read config {path}: {e}") from e
    return _build(AppConfig, data, "config")


def dump_config(cfg: AppConfig) -> str:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return yaml.safe_dump(plain(dataclasses.asdict(cfg)), sort_keys=False)

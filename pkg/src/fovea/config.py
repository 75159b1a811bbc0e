"""Run configuration: one JSON file with a block per stage, flags override it."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .crf import CrfParams
from .foveaparse import FusionConfig
from .metrics import REGION_KINDS
from .perspective import HeatmapGtConfig
from .synth import OracleConfig, SceneSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsConfig:
    region: str = "full"
    central_frac: float = 0.5

    def __post_init__(self):
        if self.region not in REGION_KINDS:
            raise ValueError(f"region {self.region!r} not in {REGION_KINDS}")
        if not 0 < self.central_frac < 1:
            raise ValueError("central_frac must lie in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    num_scenes: int = 10
    prior_size: tuple[int, int] | None = None  # (width, height); defaults to the scene size
    scene: SceneSpec = field(default_factory=SceneSpec)
    heatmap: HeatmapGtConfig = field(default_factory=HeatmapGtConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    crf: CrfParams = field(default_factory=CrfParams)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_json(self) -> dict:
        def plain(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {f.name: plain(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, (list, tuple)):
                return [plain(v) for v in obj]
            return obj
        return plain(self)


_BLOCKS = {"heatmap": HeatmapGtConfig, "fusion": FusionConfig, "crf": CrfParams,
           "oracle": OracleConfig, "metrics": MetricsConfig}


def build_block(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError(f"{where}.{key}: unknown config key")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(d: dict, where: str = "config") -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    known = {f.name for f in fields(RunConfig)}
    for key in d:
        if key not in known:
            raise ConfigError(f"{where}.{key}: unknown config key")
    kw = {}
    for key, value in d.items():
        if key in _BLOCKS:
            kw[key] = build_block(_BLOCKS[key], value, f"{where}.{key}")
        elif key == "scene":
            try:
                kw[key] = SceneSpec.from_json(value)
            except (TypeError, ValueError, KeyError) as e:
                raise ConfigError(f"{where}.scene: {e}") from e
        elif key == "prior_size":
            kw[key] = None if value is None else tuple(int(v) for v in value)
        else:
            if not isinstance(value, int):
                raise ConfigError(f"{where}.{key}: expected an integer")
            kw[key] = value
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from e
    return config_from_dict(doc, str(path))


def override(cfg: RunConfig, block: str, **changes) -> RunConfig:
    """Replace non-None fields of one block (or top-level fields with block='')."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    try:
        if not block:
            return replace(cfg, **changes)
        return replace(cfg, **{block: replace(getattr(cfg, block), **changes)})
    except ValueError as e:
        raise ConfigError(f"{block or 'config'}: {e}") from e

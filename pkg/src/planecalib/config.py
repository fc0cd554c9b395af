"""Pipeline configuration: nested dataclasses, JSON loading and ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SchemaError
from .init import InitConfig
from .joint import JointConfig
from .lidar_pose import IcpConfig, RefineConfig
from .visual_ba import VisualBAConfig

CONFIG_VERSION = 1


@dataclass
class LidarStageConfig:
    refine: bool = True
    icp: IcpConfig = field(default_factory=IcpConfig)
    refinement: RefineConfig = field(default_factory=RefineConfig)


@dataclass
class MetricsConfig:
    stride: int = 4


@dataclass
class PipelineConfig:
    format_version: int = CONFIG_VERSION
    threads: int = 1
    lidar: LidarStageConfig = field(default_factory=LidarStageConfig)
    visual: VisualBAConfig = field(default_factory=VisualBAConfig)
    init: InitConfig = field(default_factory=InitConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self):
        return dataclasses.asdict(self)


def _merge(obj, doc, path, problems):
    """Copy values from ``doc`` into dataclass ``obj``; nested dataclasses recurse."""
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in doc.items():
        where = f"{path}{key}"
        if key not in names:
            problems.append(f"{where}: unknown configuration key")
            continue
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                problems.append(f"{where}: expected an object")
            else:
                _merge(current, value, where + ".", problems)
            continue
        coerced = _coerce(current, value)
        if coerced is None and value is not None:
            problems.append(f"{where}: expected {type(current).__name__}, got {value!r}")
            continue
        setattr(obj, key, coerced)


def _coerce(current, value):
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        return value if isinstance(value, bool) else None
    if isinstance(current, int):
        return value if isinstance(value, int) and not isinstance(value, bool) else None
    if isinstance(current, float):
        return float(value) if isinstance(value, (int, float)) and not isinstance(value, bool) else None
    if isinstance(current, str):
        return value if isinstance(value, str) else None
    return value


def merge_config(cfg: PipelineConfig, doc, source="config") -> PipelineConfig:
    """Apply a (possibly partial) configuration document on top of ``cfg``."""
    problems = []
    version = doc.get("format_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        problems.append(f"format_version: unsupported version {version!r}")
    _merge(cfg, doc, "", problems)
    if problems:
        raise SchemaError(problems, source)
    return cfg


def config_from_dict(doc, source="config") -> PipelineConfig:
    return merge_config(PipelineConfig(), doc, source)


def load_config(path) -> PipelineConfig:
    return config_from_dict(json.loads(Path(path).read_text()), str(path))


def parse_override(text):
    """``"joint.alpha=2.5"`` -> ``{"joint": {"alpha": 2.5}}`` (values parsed as JSON when possible)."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ValueError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    doc = value
    for part in reversed(key.split(".")):
        doc = {part: doc}
    return doc


def apply_overrides(cfg: PipelineConfig, overrides, source="--set") -> PipelineConfig:
    problems = []
    for text in overrides:
        _merge(cfg, parse_override(text), "", problems)
    if problems:
        raise SchemaError(problems, source)
    return cfg

"""Pipeline configuration: one YAML file, ``--set`` overrides, ``MANGROVEWATCH_*`` env overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from mangrovewatch.errors import ConfigurationError
from mangrovewatch.model import ModelConfig, config_hash
from mangrovewatch.preprocess import PreprocessParams
from mangrovewatch.training import TrainConfig

ENV_PREFIX = "MANGROVEWATCH_"


@dataclass
class Paths:
    manifest: str = "data/manifest.json"
    labels: str = "data/labels.tif"
    regions: str = "data/regions.tif"
    truth: str | None = None
    workspace: str = "workspace"


@dataclass
class DatasetParams:
    tile_size: int = 256
    stride: int = 256
    val_fraction: float = 0.10
    seed: int = 0
    label_year: int = 2020
    scale: float = 10_000.0
    strata_blocks: tuple[int, int] = (2, 2)


@dataclass
class PredictParams:
    overlap: int = 32
    years: list[int] | None = None


@dataclass
class AnalysisParams:
    years: list[int] | None = None
    carbon_density: float = 94.3
    co2_factor: float = 44.0 / 12.0
    growth_method: str = "geometric"
    reference_co2_t: float | None = None
    change_pair: tuple[int, int] | None = None


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    preprocess: PreprocessParams = field(default_factory=PreprocessParams)
    dataset: DatasetParams = field(default_factory=DatasetParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    predict: PredictParams = field(default_factory=PredictParams)
    analysis: AnalysisParams = field(default_factory=AnalysisParams)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def path(self, name: str) -> Path | None:
        value = getattr(self.paths, name)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def workspace(self) -> Path:
        return self.path("workspace")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("base_dir")
        return doc

    def digest(self) -> str:
        return config_hash(self.to_dict())

    def validate(self) -> None:
        self.model.validate()
        if not 0 < self.preprocess.max_cloud_pct <= 100:
            raise ConfigurationError("preprocess.max_cloud_pct must lie in (0, 100]")
        if self.dataset.tile_size < 1 or self.dataset.stride < 1:
            raise ConfigurationError("dataset.tile_size and dataset.stride must be >= 1")
        if not 0 < self.dataset.val_fraction < 1:
            raise ConfigurationError("dataset.val_fraction must lie in (0, 1)")
        if self.analysis.carbon_density <= 0:
            raise ConfigurationError("analysis.carbon_density must be positive")
        if self.analysis.growth_method not in ("geometric", "arithmetic"):
            raise ConfigurationError("analysis.growth_method is 'geometric' or 'arithmetic'")
        if not 0 <= self.predict.overlap < self.dataset.tile_size:
            raise ConfigurationError("predict.overlap must lie in [0, tile_size)")


def _build(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        if f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = None if f.default is dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value or {}, f"{where}.{name}")
        elif isinstance(value, list) and isinstance(default, tuple):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def _set_dotted(doc: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def env_overrides(environ: Mapping[str, str] | None = None) -> list[tuple[str, Any]]:
    """``MANGROVEWATCH_TRAIN__MAX_EPOCHS=5`` -> ("train.max_epochs", 5)."""
    environ = os.environ if environ is None else environ
    out = []
    for name, raw in sorted(environ.items()):
        if name.startswith(ENV_PREFIX) and "__" in name:
            key = name[len(ENV_PREFIX) :].lower().replace("__", ".")
            out.append((key, yaml.safe_load(raw)))
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    environ: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """File first, then environment, then ``--set`` flags (last wins)."""
    doc: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
        base = path.parent
    for key, value in env_overrides(environ):
        _set_dotted(doc, key, value)
    for text in overrides:
        _set_dotted(doc, *parse_override(text))
    cfg = _build(PipelineConfig, doc, "config")
    cfg.base_dir = base
    cfg.validate()
    return cfg


def dump_config(cfg: PipelineConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=False))
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj

"""Declarative run configuration: one YAML file plus ``section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3``-style floats (YAML 1.1 requires a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


def _yaml_load(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass
class SceneSection:
    image_size: int = 128
    count_range: list[int] = field(default_factory=lambda: [20, 60])
    head_radius_range: list[float] = field(default_factory=lambda: [2.5, 4.5])
    background_texture: str = "noise"
    seed: int = 0


@dataclass
class NoiseSection:
    missing_rate: float = 0.1
    shift_sigma: float = 0.0
    seed: int = 0


@dataclass
class DataSection:
    dataset: str = "data/synth"
    n_train: int = 200
    n_val: int = 50
    overwrite: bool = False
    train_split: str = "train"


@dataclass
class AblateSection:
    delta_max: list[float] = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.15, 0.3])
    alpha_max: float | None = None  # None -> train.alpha_max
    n_seeds: int = 3
    master_seed: int = 0


@dataclass
class EvalSection:
    checkpoint: str = ""
    head: str = "average"
    split: str = "val"
    batch_size: int = 1


@dataclass
class PredictSection:
    checkpoint: str = ""
    image: str = ""


@dataclass
class PlotSection:
    checkpoint: str = ""
    split: str = "val"
    n_images: int = 4
    metrics: str = ""  # optional metrics.jsonl for a training-curve figure


@dataclass
class Config:
    data: DataSection = field(default_factory=DataSection)
    scene: SceneSection = field(default_factory=SceneSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateSection = field(default_factory=AblateSection)
    eval: EvalSection = field(default_factory=EvalSection)
    predict: PredictSection = field(default_factory=PredictSection)
    plot: PlotSection = field(default_factory=PlotSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw: Any, where: str):
    """Instantiate dataclass ``cls`` from a mapping, recursing into dataclass-typed fields."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{unknown[0]}")
    kwargs = {}
    defaults = cls()
    for name, value in raw.items():
        sub = getattr(defaults, name)
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(type(sub), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: {p} is not a section")
    node[parts[-1]] = value


def _check_path(dotted: str) -> None:
    node = Config()
    for p in dotted.split("."):
        if not dataclasses.is_dataclass(node) or p not in {f.name for f in dataclasses.fields(node)}:
            raise ConfigError(f"unknown key {dotted}")
        node = getattr(node, p)


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    _check_path(key)
    try:
        value = _yaml_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return key, value


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    tree: dict = {}
    if path:
        try:
            tree = _yaml_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
    for text in overrides or []:
        key, value = parse_override(text)
        _set_path(tree, key, value)
    return _build(Config, tree, "")


def dump_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))

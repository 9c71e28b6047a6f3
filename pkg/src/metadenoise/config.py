"""Experiment configuration files (YAML) with published defaults for every hyperparameter."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adapt_eval import AdaptConfig
from .degrade import DegradationSpec
from .errors import ConfigError
from .meta_train import MetaConfig
from .networks import NetworkConfig

SEED_ENV = "METADENOISE_SEED"


@dataclass
class DataPaths:
    train_clean: str | None = None
    pretrain_val: str | None = None
    finetune: list[str] = field(default_factory=list)
    finetune_val: str | None = None
    test: str | None = None


@dataclass
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    pretrain: MetaConfig = field(default_factory=MetaConfig.pretrain_defaults)
    finetune: MetaConfig = field(default_factory=MetaConfig.finetune_defaults)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    data: DataPaths = field(default_factory=DataPaths)
    output_dir: str = "runs/default"
    eval_crop: int = 256

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["degradation"] = self.degradation.to_dict()
        return out


_SECTIONS = {
    "network": NetworkConfig,
    "degradation": DegradationSpec,
    "adapt": AdaptConfig,
    "data": DataPaths,
}


def _section(cls, values, defaults):
    if values is None:
        return defaults
    if not isinstance(values, dict):
        raise ConfigError(f"section for {cls.__name__} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    merged = dataclasses.asdict(defaults) if not isinstance(defaults, DegradationSpec) else defaults.to_dict()
    merged.update(values)
    if cls is DegradationSpec:
        merged = {k: tuple(v) for k, v in merged.items()}
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    raw = dict(raw or {})
    top_known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    default = ExperimentConfig()
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _section(cls, raw.get(name), getattr(default, name))
    kwargs["pretrain"] = _section(MetaConfig, raw.get("pretrain"), default.pretrain)
    kwargs["finetune"] = _section(MetaConfig, raw.get("finetune"), default.finetune)
    kwargs["output_dir"] = str(raw.get("output_dir", default.output_dir))
    kwargs["eval_crop"] = int(raw.get("eval_crop", default.eval_crop))
    cfg = ExperimentConfig(**kwargs)

    if base_dir is not None:
        def rel(p):
            return p if p is None or os.path.isabs(p) else str((base_dir / p).resolve())

        d = cfg.data
        cfg.data = DataPaths(rel(d.train_clean), rel(d.pretrain_val), [rel(p) for p in d.finetune],
                             rel(d.finetune_val), rel(d.test))
        cfg.output_dir = rel(cfg.output_dir)

    seed = os.environ.get(SEED_ENV)
    if seed:
        try:
            seed = int(seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from exc
        cfg.pretrain.seed = seed
        cfg.finetune.seed = seed
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return config_from_dict(raw or {}, path.parent.resolve())


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def require_paths(*paths: tuple[str, str | None]) -> None:
    """Raise :class:`ConfigError` for the first missing or unset path."""
    for label, p in paths:
        if not p:
            raise ConfigError(f"data.{label} is not set")
        if not Path(p).exists():
            raise ConfigError(f"data.{label} does not exist: {p}")

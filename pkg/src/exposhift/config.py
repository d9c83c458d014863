"""YAML run configuration mirroring ModelConfig / TrainConfig / LossWeights.

Example::

    model:
      deform_mode: full
      como_max_tokens: 4096
    train:
      iterations: 500
      patch_size: 32
      lr: 0.002
      output_dir: runs/overfit
    loss:
      lambda2: 0.5
    data:
      root: data/lcdp/train       # input/ and gt/ subdirectories
      manifest: null              # or a TSV of input<TAB>gt pairs
      val_root: data/lcdp/valid
    synthetic:                    # used when data.root is absent
      count: 4
      size: 64
      seed: 1
      degradation: {noise_sigma: 0.005}
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import DegradationSpec, PairedDataset, scan_dataset, synthetic_pairs
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig

CONFIG_ENV = "EXPOSHIFT_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str | None = None
    manifest: str | None = None
    val_root: str | None = None
    val_manifest: str | None = None


@dataclass
class SyntheticConfig:
    count: int = 4
    size: int = 64
    seed: int = 0
    val_count: int = 0
    degradation: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _build(section: str, cls, values) -> object:
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key '{section}.{unknown[0]}' (known: {', '.join(sorted(known))})")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def parse_config(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}' (sections: {', '.join(_SECTIONS)})")
    parts = {name: _build(name, type(factory()), raw.get(name)) for name, factory in _SECTIONS.items()}
    DegradationSpec(**parts["synthetic"].degradation)  # validate early
    return RunConfig(**parts)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read a YAML config; ``None`` falls back to ``$EXPOSHIFT_CONFIG``."""
    if path is None:
        path = os.environ.get(CONFIG_ENV)
        if not path:
            raise ConfigError(f"no config given and ${CONFIG_ENV} is unset")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(raw)


def build_datasets(cfg: RunConfig) -> tuple[PairedDataset, PairedDataset | None]:
    """Training and optional validation datasets described by ``cfg``."""
    if cfg.data.root:
        train = scan_dataset(cfg.data.root, cfg.data.manifest).preload()
        val = scan_dataset(cfg.data.val_root, cfg.data.val_manifest).preload() if cfg.data.val_root else None
        return train, val
    syn = cfg.synthetic
    spec = DegradationSpec(**{"seed": syn.seed, **syn.degradation})
    train = PairedDataset.from_tensors(synthetic_pairs(syn.count, syn.size, spec, syn.seed))
    val = None
    if syn.val_count:
        vspec = DegradationSpec(**{**spec.__dict__, "seed": spec.seed + 7919})
        val = PairedDataset.from_tensors(synthetic_pairs(syn.val_count, syn.size, vspec, syn.seed + 7919))
    return train, val

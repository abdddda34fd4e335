"""YAML run configuration shared by every CLI command.

Top-level keys (all optional unless a command needs them)::

    dataset: path/to/data.jsonl      # JSON-lines dataset, or ...
    synthetic: {num_sessions: 200}   # ... a generator spec built in memory
    model: {...}                     # ModelConfig fields
    train: {...}                     # TrainConfig fields
    seeds: [0, 1, 2]
    calibration: {n_bins: 10, levels: [...], convention: quantile, split: test}
    ablation: {epochs: 20}

``model.input_dim`` is filled in from the data when omitted.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .calibration import CONVENTIONS, DEFAULT_LEVELS
from .data import SPLITS, SynthSpec, generate_synthetic, load_dataset
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

OUT_ENV = "PROBSEQ_OUT"
TOP_LEVEL_KEYS = ("dataset", "synthetic", "model", "train", "seeds", "calibration", "ablation")


@dataclass
class CalibrationSettings:
    n_bins: int = 10
    levels: tuple = DEFAULT_LEVELS
    convention: str = "quantile"
    split: str = "test"

    def __post_init__(self):
        self.levels = tuple(float(q) for q in self.levels)
        if self.n_bins < 2:
            raise ConfigError("calibration.n_bins must be >= 2")
        if not self.levels or not all(0 < q < 1 for q in self.levels):
            raise ConfigError("calibration.levels must be fractions in (0, 1)")
        if self.convention not in CONVENTIONS:
            raise ConfigError(f"calibration.convention must be one of {CONVENTIONS}")
        if self.split not in SPLITS:
            raise ConfigError(f"calibration.split must be one of {SPLITS}")


@dataclass
class RunConfig:
    dataset: str | None = None
    synthetic: dict | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seeds: tuple = (0,)
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    ablation_epochs: int = 20
    source_text: str = ""
    base_dir: Path = field(default_factory=Path.cwd)

    def train_config(self, seed, **overrides):
        values = {**self.train, "seed": seed, **overrides}
        try:
            return TrainConfig.from_dict(values)
        except TypeError as exc:
            raise ConfigError(f"invalid train section: {exc}") from None

    def model_config(self, input_dim, seed, **overrides):
        values = {"input_dim": input_dim, **self.model, "init_seed": seed, **overrides}
        try:
            cfg = ModelConfig.from_dict(values)
        except TypeError as exc:
            raise ConfigError(f"invalid model section: {exc}") from None
        if cfg.input_dim != input_dim:
            raise ConfigError(f"model.input_dim={cfg.input_dim} but the data has width {input_dim}")
        return cfg

    def synth_spec(self, seed=None):
        values = dict(self.synthetic or {})
        if seed is not None:
            values["seed"] = seed
        try:
            return SynthSpec(**values)
        except TypeError as exc:
            raise ConfigError(f"invalid synthetic section: {exc}") from None

    def load_sessions(self):
        if self.dataset is not None:
            path = Path(self.dataset)
            if not path.is_absolute():
                path = self.base_dir / path
            return load_dataset(path)
        if self.synthetic is not None:
            return generate_synthetic(self.synth_spec())[0]
        raise ConfigError("config needs either 'dataset' or 'synthetic'")

    def echo(self):
        return {
            "dataset": self.dataset,
            "synthetic": self.synthetic,
            "model": self.model,
            "train": self.train,
            "seeds": list(self.seeds),
            "calibration": {**dataclasses.asdict(self.calibration), "levels": list(self.calibration.levels)},
            "ablation": {"epochs": self.ablation_epochs},
        }


def _section(raw, key):
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    return value


def parse_config(text, base_dir=None):
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    unknown = set(raw) - set(TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if raw.get("dataset") is not None and raw.get("synthetic") is not None:
        raise ConfigError("give either 'dataset' or 'synthetic', not both")

    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("'seeds' must be a non-empty list of integers")
    try:
        calibration = CalibrationSettings(**_section(raw, "calibration"))
    except TypeError as exc:
        raise ConfigError(f"invalid calibration section: {exc}") from None
    ablation = _section(raw, "ablation")
    if set(ablation) - {"epochs"}:
        raise ConfigError("ablation section only accepts 'epochs'")

    cfg = RunConfig(
        dataset=None if raw.get("dataset") is None else str(raw["dataset"]),
        synthetic=None if raw.get("synthetic") is None else _section(raw, "synthetic"),
        model=_section(raw, "model"),
        train=_section(raw, "train"),
        seeds=tuple(seeds),
        calibration=calibration,
        ablation_epochs=int(ablation.get("epochs", 20)),
        source_text=text,
        base_dir=Path(base_dir) if base_dir is not None else Path.cwd(),
    )
    # fail fast on bad model/train sections before any work starts
    cfg.train_config(cfg.seeds[0])
    if cfg.synthetic is not None:
        cfg.synth_spec()
    return cfg


def load_config(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_config(text, base_dir=path.parent)


def default_out_dir(command):
    root = os.environ.get(OUT_ENV)
    return Path(root if root else "runs") / command

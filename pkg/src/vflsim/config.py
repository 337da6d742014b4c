"""Experiment configuration: a JSON key-value tree with strict validation.

The document maps 1:1 onto ExperimentConfig. Unknown keys are rejected at
every level so typos fail loudly instead of silently running defaults.
A single master seed drives model init, data shuffling, and fault traces
through domain-separated streams; each of the three can be pinned
independently for controlled experiments.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError
from .faults import FaultConfig

STRATEGIES = ("dvfl", "splitnn-wait", "splitnn-skip", "splitnn-zeros")
DATASET_KINDS = ("mnist", "csv", "blobs")
ACTIVATION_NAMES = ("relu", "leaky_relu", "sigmoid", "identity")

DATA_ROOT_ENV = "VFLSIM_DATA_ROOT"


@dataclass
class DatasetConfig:
    kind: str = "mnist"
    dir: str = "data/mnist"  # mnist: directory holding the four IDX files
    path: str | None = None  # csv: file path
    label_column: int | None = None  # csv
    header: bool = False  # csv
    n_samples: int = 600  # blobs
    n_features: int = 16  # blobs
    n_classes: int = 4  # blobs
    test_fraction: float = 0.2  # csv and blobs holdout

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(
                f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}"
            )
        if self.kind == "csv" and not self.path:
            raise ConfigError("dataset.path is required when dataset.kind is 'csv'")
        if self.kind == "csv" and self.label_column is None:
            raise ConfigError("dataset.label_column is required for csv datasets")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(
                f"dataset.test_fraction must lie in (0, 1), got {self.test_fraction}"
            )
        if self.kind == "blobs":
            if self.n_samples < 4 or self.n_features < 1 or self.n_classes < 2:
                raise ConfigError(
                    "blobs dataset needs n_samples >= 4, n_features >= 1, "
                    "n_classes >= 2"
                )

    def resolved_dir(self) -> Path:
        """Dataset directory, relative paths anchored at the data root env var."""
        p = Path(self.dir)
        if not p.is_absolute():
            root = os.environ.get(DATA_ROOT_ENV)
            if root:
                return Path(root) / p
        return p


@dataclass
class ModelConfig:
    n_guests: int = 4
    n_hosts: int = 4
    w_g: int = 320
    w_h: int = 160
    guest_activation: str = "relu"
    host_activation: str = "leaky_relu"
    leaky_slope: float = 0.01

    def validate(self) -> None:
        if self.n_guests < 1:
            raise ConfigError(f"model.n_guests must be >= 1, got {self.n_guests}")
        if self.n_hosts < 1:
            raise ConfigError(f"model.n_hosts must be >= 1, got {self.n_hosts}")
        if self.w_g < 1 or self.w_h < 1:
            raise ConfigError("model.w_g and model.w_h must be positive")
        if self.w_g % self.n_guests:
            raise ConfigError(
                f"model.w_g ({self.w_g}) must be divisible by n_guests "
                f"({self.n_guests})"
            )
        for key in ("guest_activation", "host_activation"):
            if getattr(self, key) not in ACTIVATION_NAMES:
                raise ConfigError(
                    f"model.{key} must be one of {ACTIVATION_NAMES}, "
                    f"got {getattr(self, key)!r}"
                )


@dataclass
class TrainingConfig:
    batch_size: int = 128
    guest_epochs: int = 20
    host_epochs: int = 40
    owner_epochs: int = 60
    splitnn_epochs: int = 60
    comm_period: int = 1  # K, in guest epochs
    labeled_count: int | None = None  # limited-intersection experiments
    guest_lr: float = 1e-3
    host_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    owner_lr: float = 1e-2
    owner_momentum: float = 0.5
    splitnn_guest_lr: float = 1e-2
    splitnn_guest_momentum: float = 0.5
    splitnn_host_lr: float = 1e-3
    early_stopping: bool = True
    patience: int = 10
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"training.batch_size must be >= 1, got {self.batch_size}")
        for key in ("guest_epochs", "host_epochs", "owner_epochs", "splitnn_epochs"):
            if getattr(self, key) < 1:
                raise ConfigError(f"training.{key} must be >= 1")
        if self.comm_period < 1:
            raise ConfigError(
                f"training.comm_period must be >= 1, got {self.comm_period}"
            )
        if self.labeled_count is not None and self.labeled_count < 1:
            raise ConfigError(
                f"training.labeled_count must be >= 1 when set, "
                f"got {self.labeled_count}"
            )
        for key in ("guest_lr", "host_lr", "owner_lr", "splitnn_guest_lr",
                    "splitnn_host_lr"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"training.{key} must be positive")
        if self.patience < 1:
            raise ConfigError(f"training.patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(
                f"training.val_fraction must lie in (0, 1), got {self.val_fraction}"
            )


@dataclass
class OutputConfig:
    csv: str | None = None
    json: str | None = None

    def validate(self) -> None:
        pass


@dataclass
class ExperimentConfig:
    strategy: str = "dvfl"
    seed: int = 0
    model_seed: int | None = None
    data_seed: int | None = None
    fault_seed: int | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    faults: FaultConfig = field(default_factory=FaultConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"strategy must be one of {STRATEGIES}, got {self.strategy!r}"
            )
        self.dataset.validate()
        self.model.validate()
        self.training.validate()
        self.output.validate()
        # FaultConfig validates in its own __post_init__.

    @property
    def is_splitnn(self) -> bool:
        return self.strategy.startswith("splitnn")

    def seeds(self) -> tuple[int, int, int]:
        """(model, data, fault) seeds, defaulting to the master seed."""
        return (
            self.seed if self.model_seed is None else self.model_seed,
            self.seed if self.data_seed is None else self.data_seed,
            self.seed if self.fault_seed is None else self.fault_seed,
        )


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "faults": FaultConfig,
    "output": OutputConfig,
}

_INT_FIELDS_AS_FLOAT_OK = ("lr", "rate", "momentum", "decay", "fraction", "slope",
                           "beta", "eps", "up", "down")


def _coerce(section: str, name: str, value: Any, target_type: Any) -> Any:
    # JSON has one number type; accept ints where floats are declared.
    if isinstance(value, bool):
        return value
    if isinstance(value, int) and target_type is float:
        return float(value)
    return value


def _parse_section(name: str, cls, doc: Any):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be a mapping, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
        ftype = str(known[key].type)
        if "float" not in ftype and "int" in ftype and isinstance(value, float):
            raise ConfigError(f"{name}.{key} must be an integer, got {value!r}")
        target = float if "float" in ftype else None
        kwargs[key] = _coerce(name, key, value, target)
    return cls(**kwargs)


def parse_config(doc: dict) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from a plain dict tree."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config must be a mapping, got {type(doc).__name__}")
    top_fields = {f.name for f in fields(ExperimentConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in doc.items():
        if key not in top_fields:
            raise ConfigError(f"unknown key {key}")
        if key in _SECTIONS:
            kwargs[key] = _parse_section(key, _SECTIONS[key], value)
        else:
            kwargs[key] = value
    for key in ("seed", "model_seed", "data_seed", "fault_seed"):
        v = kwargs.get(key)
        if v is not None and not isinstance(v, int):
            raise ConfigError(f"{key} must be an integer, got {v!r}")
    if not isinstance(kwargs.get("strategy", "dvfl"), str):
        raise ConfigError("strategy must be a string")
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def config_to_doc(cfg: ExperimentConfig) -> dict:
    """Inverse of parse_config; parse(config_to_doc(c)) == c."""

    def section(obj) -> dict:
        return {f.name: getattr(obj, f.name) for f in fields(obj)}

    return {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "model_seed": cfg.model_seed,
        "data_seed": cfg.data_seed,
        "fault_seed": cfg.fault_seed,
        "dataset": section(cfg.dataset),
        "model": section(cfg.model),
        "training": section(cfg.training),
        "faults": section(cfg.faults),
        "output": section(cfg.output),
    }


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such config file: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_doc(cfg), indent=2, sort_keys=True) + "\n")


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply repeatable key=value flags onto a config dict.

    Keys use dotted paths (faults.guest_down=0.3); values parse as JSON
    literals and fall back to bare strings (strategy=dvfl works unquoted).
    """
    out = json.loads(json.dumps(doc))  # deep copy, JSON types only
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = value
    return out


def derive_seed(seed: int, *tags: int) -> int:
    """Stable 63-bit stream seed for a named purpose."""
    ss = np.random.SeedSequence([int(seed), *[int(t) for t in tags]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)

"""Strict JSON experiment configuration, shipped presets and seed fan-out."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .objective import LossWeights
from .training import TrainOptions


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key or line."""


DATASET_KINDS = ("parametric", "swiss_roll", "colored_digits")
MODEL_KINDS = ("discover", "plain_vae", "conditional_vae")


@dataclass
class DatasetSpec:
    kind: str = "parametric"
    n: int = 20000
    n_test: int = 10000
    noise_rate: float = 0.0
    jitter: float = 0.05
    standardize: bool = True
    val_fraction: float = 0.1
    n_images: int = 5000
    downsample_to: int = 14
    images_path: str | None = None
    labels_path: str | None = None

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.noise_rate <= 0.5:
            raise ConfigError(f"dataset.noise_rate must lie in [0, 0.5], got {self.noise_rate}")
        if self.n <= 0 or self.n_test <= 0:
            raise ConfigError("dataset.n and dataset.n_test must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"dataset.val_fraction must lie in (0, 1), got {self.val_fraction}")


@dataclass
class ModelSpec:
    kind: str = "discover"
    d_latent: int = 1
    n_hidden: int = 2
    d_hidden: int = 8
    activation: str = "relu"
    likelihood: str | None = None

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.activation not in ("relu", "tanh", "softplus"):
            raise ConfigError(f"model.activation {self.activation!r} not supported")
        if self.likelihood not in (None, "gaussian", "bernoulli"):
            raise ConfigError(f"model.likelihood {self.likelihood!r} not supported")
        if min(self.d_latent, self.n_hidden + 1, self.d_hidden) < 1:
            raise ConfigError("model sizes must be positive")


@dataclass
class MetricsSpec:
    nll_samples: int = 1
    mine_epochs: int = 500
    mine_samples: int = 10000
    kl_quad_points: int = 2001
    enabled: list[str] = field(default_factory=lambda: ["nll", "delta_bayes"])


@dataclass
class ExperimentConfig:
    name: str = "parametric"
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainOptions = field(default_factory=TrainOptions)
    metrics: MetricsSpec = field(default_factory=MetricsSpec)
    out_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        self.model.validate()
        if self.train.batch_size < 1 or self.train.max_epochs < 1:
            raise ConfigError("train.batch_size and train.max_epochs must be >= 1")
        if self.train.lr < 0 or (self.train.lr_adv is not None and self.train.lr_adv < 0):
            raise ConfigError("learning rates must be non-negative")
        return self

    @property
    def likelihood(self) -> str:
        if self.model.likelihood:
            return self.model.likelihood
        return "bernoulli" if self.dataset.kind == "colored_digits" else "gaussian"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "").validate()

    @classmethod
    def from_json(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be an object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_json(text, str(path))


def _build(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f" in {prefix.rstrip('.')}" if prefix else ""
        raise ConfigError(f"unknown key{'s' if len(unknown) > 1 else ''}{where}: "
                          + ", ".join(prefix + k for k in unknown))
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, current, prefix + name)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def _coerce(value, default, key):
    """Light type checking against the default's type."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list, got {value!r}")
    return value


def apply_overrides(config: ExperimentConfig, overrides: dict[str, str] | list[tuple[str, str]]
                    ) -> ExperimentConfig:
    """Return a copy with dotted-path overrides (``weights.adv=0``) applied.

    Values are parsed as JSON when possible, otherwise taken as strings.
    """
    data = config.to_dict()
    items = overrides.items() if isinstance(overrides, dict) else overrides
    for path, raw in items:
        if isinstance(raw, str):
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
        else:
            value = raw
        node = data
        keys = path.split(".")
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown key: {path}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown key: {path}")
        node[keys[-1]] = value
    return ExperimentConfig.from_dict(data)


# -- presets --------------------------------------------------------------------------

_PRESETS: dict[str, dict] = {
    "parametric": {
        "name": "parametric",
        "dataset": {"kind": "parametric", "n": 20000, "n_test": 10000},
        "model": {"kind": "discover", "d_latent": 1, "n_hidden": 2, "d_hidden": 8},
        "weights": {"rec": 0.7, "kl_z": 0.7, "kl_w": 0.2, "adv": 0.8, "rec_z": 0.3},
        "train": {"lr": 1e-3, "patience": 50, "max_epochs": 600},
        "metrics": {"enabled": ["nll", "kl_analytic", "delta_bayes"]},
    },
    "swiss_roll": {
        "name": "swiss_roll",
        "dataset": {"kind": "swiss_roll", "n": 20000, "n_test": 10000, "noise_rate": 0.3},
        "model": {"kind": "discover", "d_latent": 2, "n_hidden": 2, "d_hidden": 128},
        "weights": {"rec": 0.9, "kl_z": 0.2, "kl_w": 0.2, "adv": 8.0, "rec_z": 0.1},
        "train": {"lr": 1e-3, "patience": 50, "max_epochs": 300},
        "metrics": {"enabled": ["nll", "delta_bayes", "mi"]},
    },
    "colored_digits": {
        "name": "colored_digits",
        "dataset": {"kind": "colored_digits", "n": 10000, "n_test": 2000, "noise_rate": 0.3,
                    "n_images": 5000, "downsample_to": 14},
        "model": {"kind": "discover", "d_latent": 20, "n_hidden": 2, "d_hidden": 256},
        "weights": {"rec": 0.5, "kl_z": 1e-4, "kl_w": 1e-4, "adv": 0.1, "rec_z": 0.5},
        "train": {"lr": 1e-4, "patience": 50, "max_epochs": 200},
        "metrics": {"enabled": ["nll", "marginal_rmse"]},
    },
}
for _rho in (0.0, 0.1, 0.2, 0.3, 0.4):
    _p = copy.deepcopy(_PRESETS["swiss_roll"])
    _p["name"] = f"swiss_roll_rho{_rho:g}"
    _p["dataset"]["noise_rate"] = _rho
    _PRESETS[_p["name"]] = _p


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(preset_names())}")
    cfg = ExperimentConfig.from_dict(copy.deepcopy(_PRESETS[name]))
    return apply_overrides(cfg, overrides) if overrides else cfg


# -- seeds ----------------------------------------------------------------------------

SEED_STREAMS = ("data", "init", "train", "metric", "test_data")


@dataclass(frozen=True)
class SeedPlan:
    """Independent integer seeds derived from one master seed.

    ``np.random.SeedSequence(master).spawn(5)`` gives children in the order of
    ``SEED_STREAMS``; each child's first 32-bit word is the stream seed. Metric
    randomness therefore never perturbs training, and the held-out data never
    overlaps the training draw.
    """

    master: int
    data: int
    init: int
    train: int
    metric: int
    test_data: int

    @classmethod
    def from_master(cls, master: int) -> "SeedPlan":
        children = np.random.SeedSequence(int(master)).spawn(len(SEED_STREAMS))
        words = [int(c.generate_state(1)[0]) for c in children]
        return cls(int(master), *words)

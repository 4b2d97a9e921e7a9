"""Experiment configuration document (YAML or JSON).

Top-level keys::

    dataset, out_dir, resolution, split_seed, val_fraction
    pretrain:   autoencoder / surrogate pretraining settings
    train:      any TrainConfig field except the data keys above
    sample:     cond, s, seed
    evaluate:   distortions, n_images, seed, batch_size, out_dir

Every section is optional; missing keys take their defaults. Unknown keys
and ill-typed values raise :class:`ConfigError` naming the dotted key path.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .distortions import AutoencoderConfig, DistortionSpec, SurrogateConfig, table2_bank
from .losses import LossWeights
from .sampler import SampleConfig
from .trainer import TrainConfig

CONFIG_VERSION = 1

# keys shared by every stage, set once at the top level
_DATA_KEYS = ("dataset", "resolution", "split_seed", "val_fraction")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}" if key else message)
        self.key = key


@dataclass
class PretrainConfig:
    steps: int = 1500
    lr: float = 2e-3
    batch_size: int = 32
    seed: int = 0
    min_psnr: float = 25.0
    # the embedding AE must pass a ~35 dB residual; one downsampling keeps it above 30 dB
    autoencoder: AutoencoderConfig = field(default_factory=lambda: AutoencoderConfig(latent_channels=4, n_down=1))
    surrogate_autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)


@dataclass
class EvalConfig:
    distortions: list = field(default_factory=lambda: ["Identity", "Autoencoder", "SurrogateDeepfake"]
                              + [s.kind for s in table2_bank()[1:]])
    n_images: int = 50
    seed: int = 0
    batch_size: int = 50
    out_dir: str = ""


@dataclass
class ExperimentConfig:
    dataset: str = ""
    out_dir: str = "runs/experiment"
    resolution: int = 32
    split_seed: int = 0
    val_fraction: float = 0.1
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: dict = field(default_factory=dict)
    sample: SampleConfig = field(default_factory=SampleConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    version: int = CONFIG_VERSION

    @property
    def autoencoder_path(self) -> Path:
        return Path(self.out_dir) / "autoencoder.pt"

    @property
    def surrogate_path(self) -> Path:
        return Path(self.out_dir) / "surrogate.pt"

    @property
    def train_dir(self) -> Path:
        return Path(self.out_dir) / "train"

    @property
    def eval_dir(self) -> Path:
        return Path(self.evaluate.out_dir) if self.evaluate.out_dir else Path(self.out_dir) / "eval"

    def train_config(self) -> TrainConfig:
        kw = dict(self.train)
        kw.update({k: getattr(self, k) for k in _DATA_KEYS})
        kw.setdefault("out_dir", str(self.train_dir))
        kw.setdefault("autoencoder", str(self.autoencoder_path))
        kw.setdefault("surrogate", str(self.surrogate_path))
        try:
            return TrainConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError("train", str(exc)) from exc

    def distortion_specs(self) -> list[DistortionSpec]:
        specs = []
        for i, item in enumerate(self.evaluate.distortions):
            try:
                specs.append(DistortionSpec.from_config(item))
            except ValueError as exc:
                raise ConfigError(f"evaluate.distortions[{i}]", str(exc)) from exc
        return specs

    def resolved(self) -> dict:
        """Fully resolved document, with train defaults filled in."""
        out = asdict(self)
        out["train"] = {k: v for k, v in self.train_config().to_dict().items() if k not in _DATA_KEYS}
        out["evaluate"]["distortions"] = [s.to_dict() for s in self.distortion_specs()]
        return out


def _coerce(value, tp, key: str):
    """Check ``value`` against annotation ``tp`` (a small subset of typing is enough here)."""
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, key)
    if tp is typing.Any or tp is dict or origin is dict:
        if tp is not typing.Any and not isinstance(value, dict):
            raise ConfigError(key, f"expected a mapping, got {type(value).__name__}")
        return value
    if origin in (list, tuple) or tp in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}")
        return type(value)(value) if origin is None else (tuple(value) if origin is tuple else list(value))
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _coerce(value, args[0], key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, prefix: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in data.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if k not in names:
            raise ConfigError(key, f"unknown key; expected one of {sorted(names)}")
        kw[k] = _coerce(v, hints[k], key)
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from exc


def _check_train(data: dict) -> None:
    hints = typing.get_type_hints(TrainConfig)
    for k, v in data.items():
        key = f"train.{k}"
        if k in _DATA_KEYS:
            raise ConfigError(key, "set this at the top level; it is shared by all stages")
        if k not in hints:
            raise ConfigError(key, f"unknown key; expected one of {sorted(set(hints) - set(_DATA_KEYS))}")
        if k == "weights":
            _build(LossWeights, v, key)
        else:
            _coerce(v, hints[k], key)


def parse_config(data: dict | None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {})
    if cfg.version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {cfg.version}; expected {CONFIG_VERSION}")
    _check_train(cfg.train)
    cfg.train_config()
    cfg.distortion_specs()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from exc
    return parse_config(data)

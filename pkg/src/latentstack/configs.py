"""Configuration dataclasses and strict config-file loading.

Every run is described by plain dataclasses. Config files are YAML documents
with top-level sections ``model:``, ``train:``, ``data:`` and ``weights:``;
unknown sections or keys are an error so typos never silently fall back to
defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from latentstack.errors import ConfigError

REGIMES = ("pair", "joint", "warm_start_finetune")
CONFIG_SECTIONS = ("model", "train", "data", "weights")


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


class _Config:
    """Mapping round-trips shared by every config dataclass."""

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]):
        return from_mapping(cls, data)


@dataclass
class ModelConfig(_Config):
    """Architecture of the N-domain translation model.

    ``shared_block_depth`` counts residual stages at the top of every encoder
    and the bottom of every decoder that live in one physically shared
    parameter block spanning all domains.
    """

    num_domains: int = 4
    image_size: int = 32
    channels: int = 3
    latent_channels: int = 32
    encoder_depth: int = 1
    decoder_depth: int = 1
    residual_blocks: int = 1
    shared_block_depth: int = 1
    discriminator_layers: int = 3
    discriminator_scales: int = 1
    noise_std: float = 1.0

    def __post_init__(self) -> None:
        _check(self.num_domains >= 2 and self.num_domains % 2 == 0,
               f"num_domains must be even and >= 2, got {self.num_domains}")
        _check(self.shared_block_depth >= 1, "shared_block_depth must be >= 1")
        for name in ("encoder_depth", "decoder_depth", "discriminator_layers"):
            _check(getattr(self, name) >= 1, f"{name} must be >= 1")
        _check(self.residual_blocks >= 0, "residual_blocks must be >= 0")
        _check(self.discriminator_scales >= 1, "discriminator_scales must be >= 1")
        _check(self.encoder_depth == self.decoder_depth,
               "encoder_depth and decoder_depth must match (mirrored topology)")
        down = 2 ** self.encoder_depth
        _check(self.latent_channels % down == 0,
               f"latent_channels must be divisible by 2^encoder_depth={down}")
        _check(self.image_size % down == 0,
               f"image_size must be divisible by 2^encoder_depth={down}")
        _check(self.image_size // down >= 1, "latent spatial size must be >= 1")
        _check(self.noise_std >= 0, "noise_std must be >= 0")

    @property
    def base_channels(self) -> int:
        return self.latent_channels // (2 ** self.encoder_depth)

    @property
    def latent_size(self) -> int:
        return self.image_size // (2 ** self.encoder_depth)


@dataclass
class LossWeights(_Config):
    """Weights for the loss families; all must be finite and >= 0.

    Defaults are the package's documented baseline and are recorded in every
    checkpoint manifest so runs stay self-describing.
    """

    w_kl: float = 0.1
    w_recon: float = 100.0
    w_gan: float = 1.0
    w_cc_kl: float = 0.1
    w_cc_recon: float = 100.0

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            _check(isinstance(v, (int, float)) and v >= 0 and v == v and abs(v) != float("inf"),
                   f"{f.name} must be finite and >= 0, got {v!r}")


@dataclass
class TrainConfig(_Config):
    """Hyperparameters of one training run."""

    regime: str = "pair"
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 500
    weights: LossWeights = field(default_factory=LossWeights)
    noise_enabled: bool = True
    divergence_limit: float = 1e6

    def __post_init__(self) -> None:
        _check(self.regime in REGIMES, f"regime must be one of {REGIMES}, got {self.regime!r}")
        _check(self.steps > 0, "steps must be > 0")
        _check(self.batch_size >= 1, "batch_size must be >= 1")
        _check(self.checkpoint_every >= 1, "checkpoint_every must be >= 1")
        if isinstance(self.weights, Mapping):
            self.weights = from_mapping(LossWeights, self.weights)


@dataclass
class OracleConfig(_Config):
    """Thresholds of the pixel-statistic attribute oracle."""

    hue_margin: float = 0.08
    stripe_energy: float = 0.08

    def __post_init__(self) -> None:
        _check(self.hue_margin > 0, "hue_margin must be > 0")
        _check(self.stripe_energy > 0, "stripe_energy must be > 0")


@dataclass
class ClassifierSpec(_Config):
    """Attribute-combination classifier: one class per combination."""

    num_classes: int = 4
    architecture: str = "tiny"
    train_fraction: float = 0.8
    steps: int = 300
    seed: int = 0
    batch_size: int = 32
    learning_rate: float = 1e-3
    min_examples_per_class: int = 8

    def __post_init__(self) -> None:
        _check(self.architecture in ("tiny", "vgg11"),
               f"architecture must be 'tiny' or 'vgg11', got {self.architecture!r}")
        _check(self.num_classes >= 2, "num_classes must be >= 2")
        _check(0 < self.train_fraction < 1, "train_fraction must be in (0, 1)")
        _check(self.steps > 0, "steps must be > 0")


def from_mapping(cls: type, data: Mapping[str, Any]) -> Any:
    """Build a config dataclass from a mapping, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}; known: {sorted(known)}")
    return cls(**dict(data))


def load_config_file(path: str | Path) -> dict[str, dict[str, Any]]:
    """Load a YAML config file and validate its section names."""
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config file {p}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {p} is not valid YAML: {e}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {p} must be a mapping of sections, got {type(raw).__name__}")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}; known: {list(CONFIG_SECTIONS)}")
    for name, section in raw.items():
        if section is not None and not isinstance(section, dict):
            raise ConfigError(f"config section '{name}' must be a mapping")
    return {k: dict(v or {}) for k, v in raw.items()}


def as_dict(cfg: Any) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def config_hash(cfg: Any) -> str:
    """Stable content hash of a config dataclass (or plain dict)."""
    payload = as_dict(cfg) if dataclasses.is_dataclass(cfg) else cfg
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()

"""Run configuration.

All hyperparameters live in nested dataclasses. ``RunConfig.from_dict`` rejects
unknown keys at every level so that typos in config files fail loudly, and
``to_dict`` produces the plain-JSON echo stored in checkpoints and reports.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Tuple

import yaml

from .errors import ConfigError


@dataclass
class WorldConfig:
    image_size: int = 64
    n_patients: int = 200
    ehr_channels: int = 6
    n_abnormality: int = 1
    n_phenotypes: int = 25
    state_noise: float = 0.04
    drift_std: float = 0.012
    observation_noise: float = 0.15
    image_noise: float = 0.01
    obs_prob: float = 0.5
    channel_obs_prob: float = 0.7
    stay_min: int = 60
    stay_max: int = 110
    first_image_min: int = -24
    first_image_max: int = 12
    image_gap_mean: float = 22.0
    image_gap_min: int = 4
    initial_state: Optional[float] = None
    seed: int = 0

    def validate(self, compression: int = 8) -> None:
        if self.image_size % compression:
            raise ConfigError(f"world.image_size={self.image_size} is not a multiple of {compression}")
        for name in ("state_noise", "drift_std", "observation_noise", "image_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"world.{name} must be >= 0")
        if self.n_patients < 0 or self.ehr_channels < 1:
            raise ConfigError("world.n_patients must be >= 0 and world.ehr_channels >= 1")
        if self.stay_min > self.stay_max:
            raise ConfigError("world.stay_min exceeds world.stay_max")
        if self.initial_state is not None and not 0.0 <= self.initial_state <= 1.0:
            raise ConfigError("world.initial_state must lie in [0, 1]")


@dataclass
class VaeConfig:
    compression: int = 8
    latent_channels: int = 4
    channels: Tuple[int, ...] = (16, 32, 64)
    n_labels: int = 1
    classifier_hidden: int = 64
    disc_channels: int = 16
    kl_weight: float = 1e-6
    adv_weight: float = 0.05
    adv_warmup_steps: int = 600
    cls_weight: float = 0.1
    perceptual_weight: float = 0.0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class EhrConfig:
    d_model: int = 128
    n_heads: int = 8
    ff_dim: int = 512
    max_len: int = 70
    aux_hidden: int = 64


@dataclass
class UnetConfig:
    channels: Tuple[int, ...] = (32, 64, 96)
    n_heads: int = 8
    norm_groups: int = 8


@dataclass
class LdmConfig:
    n_steps: int = 1000
    schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    margin: float = 0.2
    beta_pert: float = 0.5
    aux_weight: float = 1.0
    contrastive: bool = True
    hinge_stop_grad: bool = False
    use_ehr: bool = True
    use_reference: bool = True
    eps_skip: bool = True
    min_gap_hours: int = 12
    ddim_steps: int = 200
    eta: float = 0.0
    epochs: int = 40
    batch_size: int = 32
    lr: float = 3e-4

    def validate(self) -> None:
        if self.margin < 0:
            raise ConfigError("ldm.margin must be >= 0")
        if not 0.0 <= self.beta_pert <= 1.0:
            raise ConfigError("ldm.beta_pert must lie in [0, 1]")
        if self.ddim_steps > self.n_steps or self.ddim_steps < 1:
            raise ConfigError("ldm.ddim_steps must lie in [1, n_steps]")


@dataclass
class PredictorConfig:
    task: str = "mortality"
    window_hours: int = 48
    fusion_dim: int = 128
    image_widths: Tuple[int, ...] = (8, 16, 32, 64)
    image_blocks: Tuple[int, ...] = (3, 4, 6, 3)
    latent_heads: int = 8
    latent_ff_dim: int = 512
    epochs: int = 15
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 1e-2
    loss_reduction: str = "sum"
    latent_mode: str = "cache"
    warm_start_ehr: bool = False
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)

    def validate(self) -> None:
        if self.task not in ("mortality", "phenotype"):
            raise ConfigError(f"predictor.task must be mortality or phenotype, got {self.task!r}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError("predictor.loss_reduction must be sum or mean")
        if self.latent_mode not in ("cache", "fresh"):
            raise ConfigError("predictor.latent_mode must be cache or fresh")
        if len(self.image_widths) != len(self.image_blocks):
            raise ConfigError("predictor.image_widths and image_blocks differ in length")


@dataclass
class EvalConfig:
    sw_projections: int = 128
    strata_edges: Tuple[float, ...] = (12.0, 24.0, 36.0)
    plots: bool = True


@dataclass
class PathsConfig:
    cohort: str = "cohort"
    ckpt_dir: str = "checkpoints"
    report_dir: str = "reports"


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    ehr: EhrConfig = field(default_factory=EhrConfig)
    unet: UnetConfig = field(default_factory=UnetConfig)
    ldm: LdmConfig = field(default_factory=LdmConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.world.validate(self.vae.compression)
        self.ldm.validate()
        self.predictor.validate()
        if self.ehr.d_model % self.ehr.n_heads:
            raise ConfigError("ehr.d_model must be divisible by ehr.n_heads")
        if len(self.vae.channels) != (self.vae.compression.bit_length() - 1) or \
                self.vae.compression & (self.vae.compression - 1):
            raise ConfigError("vae.compression must be a power of two with one channel entry per halving")

    def to_dict(self) -> dict:
        return to_plain(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return from_plain(cls, data, "config")

    def replace(self, **overrides: Any) -> "RunConfig":
        """Return a copy with dotted-key overrides, e.g. ``{"ldm.epochs": 3}``."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                if key not in node or not isinstance(node[key], dict):
                    raise ConfigError(f"unknown config key {dotted!r}")
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[leaf] = value
        return RunConfig.from_dict(data)


def to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def from_plain(cls: type, data: Any, where: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    hints = _resolved_hints(cls)
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = from_plain(hint, value, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(hint, value, f"{where}.{name}")
    return cls(**kwargs)


def _resolved_hints(cls: type) -> dict:
    import typing

    return typing.get_type_hints(cls)


def _coerce(hint: Any, value: Any, where: str) -> Any:
    import typing

    origin = typing.get_origin(hint)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        (inner, *_rest) = typing.get_args(hint)
        return tuple(_coerce(inner, v, where) for v in value)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        return None if value is None else _coerce(args[0], value, where)
    if hint is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if hint is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if hint is bool and isinstance(value, bool):
        return value
    if hint is str and isinstance(value, str):
        return value
    raise ConfigError(f"{where}: expected {getattr(hint, '__name__', hint)}, got {value!r}")


def read_config_file(path: str | Path) -> dict:
    """Raw mapping from a YAML or JSON config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return data


def load_config(path: Optional[str | Path]) -> RunConfig:
    """Read a YAML or JSON config file; ``None`` yields the defaults."""
    if path is None:
        return RunConfig()
    cfg = RunConfig.from_dict(read_config_file(path))
    cfg.validate()
    return cfg

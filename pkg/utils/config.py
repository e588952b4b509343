"""
Experiment configuration

A run is described by one TOML file with flat sections. Every key has a
default; unknown sections or keys are rejected. Command-line overrides of
the form key=value (or section.key=value) take precedence, and a few
defaults come from the environment (see scripts/load_env.sh).
"""

import dataclasses
import json
import logging
import math
import os
import tomllib
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Optional, Tuple

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_OUTPUT_DIR = "DELTAMASK_OUTPUT_DIR"
ENV_LOG_LEVEL = "DELTAMASK_LOG_LEVEL"
ENV_WORKERS = "DELTAMASK_WORKERS"
DEFAULT_OUTPUT_DIR = "runs"


@dataclass
class FederationConfig:
    clients: int = 8
    participation: float = 1.0
    rounds: int = 40
    local_epochs: int = 1
    workers: int = 1


@dataclass
class DataConfig:
    kind: str = "blobs"
    classes: int = 2
    dim: int = 16
    samples: int = 12000
    test_samples: int = 2000
    noise: float = 1.5
    dirichlet_alpha: float = 10.0


@dataclass
class ModelConfig:
    hidden: Tuple[int, ...] = (64, 64)
    head_init: str = "probe"
    probe_epochs: int = 1
    probe_lr: float = 0.05


@dataclass
class TrainingConfig:
    lr: float = 0.1
    batch_size: int = 64
    score_init: float = 0.5


@dataclass
class KappaConfig:
    start: float = 0.8
    end: float = 1.0
    mode: str = "cosine"
    ranking: str = "kl"


@dataclass
class FilterConfig:
    layout: str = "fuse"
    arity: int = 4
    bits_per_entry: int = 8


@dataclass
class ProtocolConfig:
    mode: str = "deltamask"
    eval_mode: str = "sampled"
    bypass_codec: bool = False
    size_fallback: bool = True
    prior_lambda0: float = 1.0
    check_bound: bool = False
    bound_trials: int = 200


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = ""


@dataclass
class ExperimentConfig:
    federation: FederationConfig = field(default_factory=FederationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    kappa: KappaConfig = field(default_factory=KappaConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def participants(self) -> int:
        return int(math.ceil(round(self.federation.participation * self.federation.clients, 9)))

    def validate(self) -> "ExperimentConfig":
        """Raise ConfigError naming the first offending key"""
        fed, data, kappa = self.federation, self.data, self.kappa
        checks = [
            ("federation.clients", fed.clients >= 1, "must be at least 1"),
            ("federation.participation", 0.0 < fed.participation <= 1.0, "must lie in (0, 1]"),
            ("federation.rounds", fed.rounds >= 0, "cannot be negative"),
            ("federation.local_epochs", fed.local_epochs >= 1, "must be at least 1"),
            ("federation.workers", fed.workers >= 1, "must be at least 1"),
            ("data.kind", data.kind in ("blobs", "rings"), "must be 'blobs' or 'rings'"),
            ("data.classes", data.classes >= 2, "must be at least 2"),
            ("data.dim", data.dim >= 2, "must be at least 2"),
            ("data.test_samples", 0 < data.test_samples < data.samples, "must lie in (0, samples)"),
            ("data.samples", data.samples - data.test_samples >= fed.clients, "leaves fewer training samples than clients"),
            ("data.noise", data.noise >= 0.0, "cannot be negative"),
            ("data.dirichlet_alpha", data.dirichlet_alpha > 0.0, "must be positive"),
            ("model.hidden", len(self.model.hidden) >= 1 and all(w > 0 for w in self.model.hidden), "needs positive widths"),
            ("model.head_init", self.model.head_init in ("probe", "kaiming"), "must be 'probe' or 'kaiming'"),
            ("model.probe_epochs", self.model.probe_epochs >= 0, "cannot be negative"),
            ("training.lr", self.training.lr >= 0.0, "cannot be negative"),
            ("training.batch_size", self.training.batch_size >= 1, "must be at least 1"),
            ("training.score_init", 0.0 < self.training.score_init < 1.0, "must lie in (0, 1)"),
            ("kappa.start", 0.0 < kappa.start <= 1.0, "must lie in (0, 1]"),
            ("kappa.end", 0.0 < kappa.end <= 1.0, "must lie in (0, 1]"),
            ("kappa.mode", kappa.mode in ("cosine", "constant"), "must be 'cosine' or 'constant'"),
            ("kappa.ranking", kappa.ranking in ("kl", "random"), "must be 'kl' or 'random'"),
            ("filter.layout", self.filter.layout in ("fuse", "xor"), "must be 'fuse' or 'xor'"),
            ("filter.arity", self.filter.arity in (3, 4), "must be 3 or 4"),
            ("filter.bits_per_entry", self.filter.bits_per_entry in (8, 16, 32), "must be 8, 16 or 32"),
            ("protocol.mode", self.protocol.mode in ("deltamask", "dense"), "must be 'deltamask' or 'dense'"),
            ("protocol.eval_mode", self.protocol.eval_mode in ("sampled", "threshold"), "must be 'sampled' or 'threshold'"),
            ("protocol.prior_lambda0", self.protocol.prior_lambda0 > 0.0, "must be positive"),
            ("protocol.bound_trials", self.protocol.bound_trials >= 1, "must be at least 1"),
            ("run.seed", self.run.seed >= 0, "cannot be negative"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(f"Invalid value for '{key}': {message}", key=key)
        if not 1 <= self.participants <= fed.clients:
            raise ConfigError("federation.participation selects no client", key="federation.participation")
        return self

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_toml_value(value)}")
            lines.append("")
        return "\n".join(lines)


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(ExperimentConfig)}


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    return json.dumps(str(value))


def _field_types(section_cls) -> Dict[str, Any]:
    defaults = section_cls()
    return {f.name: getattr(defaults, f.name) for f in dataclasses.fields(section_cls)}


def _coerce(key: str, value, default):
    """Convert a parsed TOML value to the type of the field default"""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, tuple):
        if isinstance(value, (list, tuple)) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return tuple(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    raise ConfigError(f"Invalid type for '{key}': got {type(value).__name__} {value!r}", key=key)


def _apply(config: ExperimentConfig, section: str, key: str, value):
    full = f"{section}.{key}"
    if section not in SECTIONS:
        raise ConfigError(f"Unknown config section '{section}'", key=section)
    target = getattr(config, section)
    types = _field_types(type(target))
    if key not in types:
        raise ConfigError(f"Unknown config key '{full}'", key=full)
    setattr(target, key, _coerce(full, value, types[key]))


def _resolve_key(name: str) -> Tuple[str, str]:
    if "." in name:
        section, key = name.split(".", 1)
        return section, key
    owners = [section for section, factory in SECTIONS.items() if name in _field_types(factory)]
    if not owners:
        raise ConfigError(f"Unknown config key '{name}'", key=name)
    if len(owners) > 1:
        raise ConfigError(f"Ambiguous config key '{name}', use one of: "
                          + ", ".join(f"{s}.{name}" for s in owners), key=name)
    return owners[0], name


def parse_override(text: str) -> Tuple[str, str, Any]:
    """Split 'key=value' and parse the value as a TOML literal (bare words stay strings)"""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' is not of the form key=value", key=text)
    name, raw = text.split("=", 1)
    section, key = _resolve_key(name.strip())
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


def apply_environment(config: ExperimentConfig) -> ExperimentConfig:
    if not config.run.output_dir:
        config.run.output_dir = os.getenv(ENV_OUTPUT_DIR, DEFAULT_OUTPUT_DIR)
    workers = os.getenv(ENV_WORKERS)
    if workers:
        try:
            config.federation.workers = int(workers)
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS} must be an integer, got '{workers}'", key=ENV_WORKERS)
    return config


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """
    Build the effective configuration.

    Args:
        path: TOML file (None for pure defaults)
        overrides: 'key=value' strings applied after the file

    Raises:
        ConfigError: unreadable file, unknown key, bad type or invalid value
    """
    config = ExperimentConfig()
    if path:
        try:
            with open(path, "rb") as handle:
                document = tomllib.load(handle)
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {str(e)}")
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid TOML: {str(e)}")
        for section, values in document.items():
            if section not in SECTIONS:
                raise ConfigError(f"Unknown config section '{section}'", key=section)
            if not isinstance(values, dict):
                raise ConfigError(f"Config entry '{section}' must be a section", key=section)
            for key, value in values.items():
                _apply(config, section, key, value)

    config = apply_environment(config)
    for text in overrides:
        section, key, value = parse_override(text)
        _apply(config, section, key, value)
        logger.debug(f"Override {section}.{key} = {value!r}")
    return config.validate()

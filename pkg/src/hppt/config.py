"""Experiment configuration: defaults, INI files, and CLI flag overrides.

Precedence is CLI flag > config file > profile defaults. The config file is
flat INI with sections mirroring the config dataclasses ([stream], [model],
[refine], [train], [run]); every scalar field automatically gets a
--<section>-<field> flag.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .refine import RefineConfig
from .model import TrainConfig
from .stream import StreamConfig

STRATEGIES = ("hppt", "seq_finetune", "independent", "joint")
PROFILES = ("desk", "paper")


@dataclass
class ModelConfig:
    embed_dim: int = 16
    prompt_tokens: int = 4
    layers: int = 3
    depth1: int = 1
    depth2: int = 2
    depth3: int = 3
    n_max: int = 3


@dataclass
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tau: float = 0.5
    strategy: str = "hppt"
    seed: int = 0
    eval_samples: int = 32
    profile: str = "desk"


_SECTIONS = {
    "stream": ("stream", StreamConfig),
    "model": ("model", ModelConfig),
    "refine": ("refine", RefineConfig),
    "train": ("train", TrainConfig),
}
_RUN_FIELDS = ("tau", "strategy", "seed", "eval_samples", "profile")
_SKIP_FLAGS = {("stream", "class_lists"), ("stream", "part_counts"), ("stream", "split")}


def default_config(profile: str = "desk") -> ExperimentConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")
    cfg = ExperimentConfig(profile=profile)
    if profile == "paper":
        cfg.model.prompt_tokens = 12
    return cfg


def _coerce(raw: str, target):
    if isinstance(target, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(target, int):
        return int(raw)
    if isinstance(target, float):
        return float(raw)
    return raw


def load_file(path, cfg: ExperimentConfig) -> ExperimentConfig:
    """Apply a flat INI file on top of ``cfg`` in place."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items("run"):
                if key not in _RUN_FIELDS:
                    raise ConfigError(f"unknown [run] key {key!r}")
                setattr(cfg, key, _coerce(raw, getattr(cfg, key)))
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        attr, _ = _SECTIONS[section]
        target = getattr(cfg, attr)
        names = {f.name for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            setattr(target, key, _coerce(raw, getattr(target, key)))
    return cfg


def add_flags(parser) -> None:
    """Register --<section>-<field> overrides for every scalar config field."""
    for section, (_, cls) in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if (section, f.name) in _SKIP_FLAGS:
                continue
            default = f.default if f.default is not dataclasses.MISSING else None
            if not isinstance(default, (int, float, str, bool)):
                continue
            flag = f"--{section}-{f.name.replace('_', '-')}"
            kind = type(default)
            parser.add_argument(flag, type=str if kind is bool else kind, default=None)


def apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    for section, (attr, cls) in _SECTIONS.items():
        target = getattr(cfg, attr)
        for f in dataclasses.fields(cls):
            dest = f"{section}_{f.name}"
            value = getattr(args, dest, None)
            if value is not None:
                current = getattr(target, f.name)
                setattr(target, f.name, _coerce(str(value), current))
    for name in _RUN_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, _coerce(str(value), getattr(cfg, name)))
    return cfg


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Propagate the master seed and profile, then validate."""
    if cfg.profile == "paper" and cfg.model.prompt_tokens == 4:
        cfg.model.prompt_tokens = 12
    cfg.stream.seed = cfg.seed
    cfg.stream.n_max = cfg.model.n_max
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {cfg.strategy!r}; choose from {STRATEGIES}")
    if not 0.0 <= cfg.tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {cfg.tau}")
    if not 0.0 < cfg.refine.decay < 1.0:
        raise ConfigError(f"refine decay must lie in (0, 1), got {cfg.refine.decay}")
    if not 0.0 < cfg.refine.teleport < 1.0:
        raise ConfigError(f"refine teleport must lie in (0, 1), got {cfg.refine.teleport}")
    m = cfg.model
    if not (1 <= m.depth1 < m.depth2 < m.depth3 <= m.layers):
        raise ConfigError(f"insert depths ({m.depth1}, {m.depth2}, {m.depth3}) must be "
                          f"strictly increasing within 1..{m.layers}")
    if m.embed_dim < 1 or m.prompt_tokens < 1:
        raise ConfigError("embed_dim and prompt_tokens must be >= 1")
    if cfg.train.steps_first < 1 or cfg.train.steps_new < 1 or cfg.train.batch_size < 1:
        raise ConfigError("training steps and batch size must be >= 1")
    if cfg.refine.steps < 0:
        raise ConfigError("refine steps must be >= 0")
    if cfg.eval_samples < 1:
        raise ConfigError("eval_samples must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")


def to_document(cfg: ExperimentConfig) -> dict:
    doc: dict = {name: getattr(cfg, name) for name in _RUN_FIELDS}
    for section, (attr, _) in _SECTIONS.items():
        target = getattr(cfg, attr)
        doc[section] = {
            f.name: getattr(target, f.name)
            for f in dataclasses.fields(target)
            if isinstance(getattr(target, f.name), (int, float, str, bool, type(None)))
        }
    return doc

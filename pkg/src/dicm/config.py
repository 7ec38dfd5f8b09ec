"""Experiment configuration: one INI document with key/value sections.

Sections: [data] (synthetic generator), [model], [cluster], [train],
[output]. Unknown sections or keys are rejected; every run writes the fully
resolved document next to its outputs so any result can be regenerated from
that artifact alone.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import SyntheticConfig
from .model import AGGREGATOR_KINDS
from .runtime import MODES, ClusterConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSettings:
    type: str = "dicm"  # dicm | prerank
    d_id: int = 12
    d_raw: int = 64
    d_img: int = 12
    b_max: int = 32
    aggregator: str = "multiquery-attn"
    attention_hidden: int = 32
    normalize_attention: bool = True
    mlp_widths: tuple = (128, 64)
    use_ad_image: bool = True
    use_behavior_images: bool = True
    image_id_fields: bool = True
    extractor_seed: int = 0x5EED
    seed: int = 0
    tower_hidden: int = 64  # prerank towers
    rep_dim: int = 16

    def __post_init__(self):
        if self.type not in ("dicm", "prerank"):
            raise ConfigError(f"model.type must be dicm or prerank, got {self.type!r}")
        if self.aggregator not in AGGREGATOR_KINDS:
            raise ConfigError(
                f"model.aggregator {self.aggregator!r} not one of {AGGREGATOR_KINDS}"
            )


@dataclass
class TrainSettings:
    epochs: int = 2
    seed: int = 3
    lr0: float = 0.001
    lr_decay: float = 0.9
    lr_interval: int = 24000
    max_iterations: int = 0
    warmup: str = "non"  # non | partial | full
    warmup_checkpoint: str = ""

    def __post_init__(self):
        if self.warmup not in ("non", "partial", "full"):
            raise ConfigError(f"train.warmup must be non, partial or full, got {self.warmup!r}")
        if self.warmup != "non" and not self.warmup_checkpoint:
            raise ConfigError("train.warmup_checkpoint is required unless warmup = non")


@dataclass
class ExperimentConfig:
    data: SyntheticConfig
    model: ModelSettings
    cluster: ClusterConfig
    train: TrainSettings
    out_dir: str = "runs/out"


_SECTIONS = {
    "data": SyntheticConfig,
    "model": ModelSettings,
    "cluster": ClusterConfig,
    "train": TrainSettings,
}


def _convert(section, f, raw):
    raw = raw.strip()
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        if f.type in ("bool", bool):
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if f.type in ("tuple", tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section}] {f.name}: {e}") from e


def _parse_section(parser, section):
    cls = _SECTIONS[section]
    known = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    if parser.has_section(section):
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            values[key] = _convert(section, known[key], raw)
    try:
        return cls(**values)
    except (ValueError, ConfigError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def load_config(path, overrides=None):
    """Parse an experiment INI file; ``overrides`` maps (section, key) pairs
    to raw string values, as supplied by command-line flags."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh, source=str(path))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from e
    for section in parser.sections():
        if section not in (*_SECTIONS, "output"):
            raise ConfigError(f"unknown section [{section}]")
    for (section, key), value in (overrides or {}).items():
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)
    out_dir = "runs/out"
    if parser.has_section("output"):
        for key, raw in parser.items("output"):
            if key != "dir":
                raise ConfigError(f"[output] unknown key {key!r}")
            out_dir = raw.strip()
    return ExperimentConfig(
        data=_parse_section(parser, "data"),
        model=_parse_section(parser, "model"),
        cluster=_parse_section(parser, "cluster"),
        train=_parse_section(parser, "train"),
        out_dir=out_dir,
    )


def write_resolved(cfg, path):
    """Serialize the fully resolved configuration (defaults included)."""
    parser = configparser.ConfigParser()
    for section, obj in (("data", cfg.data), ("model", cfg.model),
                         ("cluster", cfg.cluster), ("train", cfg.train)):
        parser.add_section(section)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            parser.set(section, f.name, str(v))
    parser.add_section("output")
    parser.set("output", "dir", cfg.out_dir)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)

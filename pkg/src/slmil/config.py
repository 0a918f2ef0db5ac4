"""Run configuration: INI-style sections layered as defaults < file < flags.

Sections are ``[run]``, ``[synth]``, ``[model]``, ``[mil]`` and ``[train]``;
keys are the field names of the matching config dataclass. A file given by
``--config`` wins over the ``SLMIL_CONFIG`` environment variable.
"""
import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, InputIOError
from .gctrans import GctransConfig
from .milhead import MilConfig
from .synth import SynthConfig
from .training import TrainConfig

CONFIG_ENV = "SLMIL_CONFIG"


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: GctransConfig = field(default_factory=GctransConfig)
    mil: MilConfig = field(default_factory=MilConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    instance_subnets: int = 2
    seed: int = 0

    def validate(self):
        self.synth.validate()
        self.model.validate()
        self.mil.validate()
        self.train.validate()
        return self

    def to_dict(self):
        return {
            "run": {"instance_subnets": self.instance_subnets, "seed": self.seed},
            "synth": self.synth.to_dict(),
            "model": self.model.to_dict(),
            "mil": self.mil.to_dict(),
            "train": self.train.to_dict(),
        }


_SECTIONS = {"synth": "synth", "model": "model", "mil": "mil", "train": "train"}


def _coerce(raw, current, where):
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(current).__name__}") from None


def _apply(obj, key, raw, where):
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"{where}: unknown key {key!r}")
    setattr(obj, key, _coerce(raw, getattr(obj, key), f"{where}.{key}"))


def load_config(path=None):
    """Parse a config file (or ``$SLMIL_CONFIG``) on top of the defaults."""
    cfg = RunConfig()
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return cfg
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise InputIOError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items(section):
                if key not in ("instance_subnets", "seed"):
                    raise ConfigError(f"{path} [run]: unknown key {key!r}")
                setattr(cfg, key, _coerce(raw, getattr(cfg, key), f"[run].{key}"))
        elif section in _SECTIONS:
            target = getattr(cfg, _SECTIONS[section])
            for key, raw in parser.items(section):
                _apply(target, key, raw, f"{path} [{section}]")
        else:
            raise ConfigError(f"{path}: unknown section [{section}]")
    if parser.has_section("run") and "seed" in parser["run"]:
        _propagate_seed(cfg)
    return cfg


def _propagate_seed(cfg):
    cfg.synth.seed = cfg.seed
    cfg.train.seed = cfg.seed


def apply_overrides(cfg, seed=None, instance_subnets=None):
    if seed is not None:
        cfg.seed = int(seed)
        _propagate_seed(cfg)
    if instance_subnets is not None:
        cfg.instance_subnets = int(instance_subnets)
    return cfg.validate()


def write_config(path, cfg):
    """Write ``cfg`` back out in the same INI layout."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in cfg.to_dict().items():
        parser[section] = {k: ",".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v)
                           for k, v in values.items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)

"""Run configuration: JSON sections backbone / train / data / eval."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import Nuisance, SynthSpec
from .training import TrainConfig

SEED_ENV = "XREID_SEED"


class ConfigError(ValueError):
    """Config JSON that does not describe a valid run."""


@dataclass
class EvalConfig:
    train_frac: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError(f"train_frac must be in (0, 1), got {self.train_frac}")


SECTIONS = {"backbone": BackboneConfig, "train": TrainConfig, "data": SynthSpec, "eval": EvalConfig}


def _same_kind(default, value) -> bool:
    if isinstance(default, bool) or isinstance(value, bool):
        return isinstance(default, bool) and isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float))
    return isinstance(value, type(default))


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kw = dict(raw)
    defaults = {f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}
    for key, value in kw.items():
        if key in defaults and not _same_kind(defaults[key], value):
            raise ConfigError(f"{where}.{key}: expected {type(defaults[key]).__name__}, got {value!r}")
        if isinstance(defaults.get(key), float):
            kw[key] = float(value)
    if cls is SynthSpec and "nuisance" in kw:
        kw["nuisance"] = _build(Nuisance, kw["nuisance"], f"{where}.nuisance")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s) {unknown}")
        return cls(**{name: _build(kind, raw.get(name, {}), name) for name, kind in SECTIONS.items()})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        """Canonical JSON: sorted keys, two-space indent, trailing newline."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed),
                                   data=dataclasses.replace(self.data, seed=seed))


def load_config(path: str | os.PathLike | None, env: dict | None = None) -> RunConfig:
    """Read a config file (or defaults when ``path`` is None) and apply XREID_SEED."""
    cfg = RunConfig() if path is None else RunConfig.loads(Path(path).read_text())
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "") != "":
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        cfg = cfg.with_seed(seed)
    return cfg

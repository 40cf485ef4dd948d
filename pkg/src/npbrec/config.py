"""Run configuration as a sectioned ``key = value`` text file.

Sections map one-to-one onto the dataclasses they configure::

    [data]     n_train, n_val, n_test
    [phantom]  PhantomSpec
    [model]    ModelConfig
    [train]    TrainConfig
    [eval]     EvalConfig

Every key has a default, so an empty file is a valid config. Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import datetime as _dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .data import PhantomSpec
from .model import ModelConfig
from .training import TrainConfig

__all__ = ["ConfigError", "DataConfig", "EvalConfig", "RunConfig", "config_text", "load_config", "write_config_echo"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 64
    n_val: int = 8
    n_test: int = 16


@dataclass(frozen=True)
class EvalConfig:
    accelerations: tuple = (4, 8)
    mask_kinds: tuple = ("random", "equispaced")
    mc_samples: int = 9
    burnin_ks: tuple = tuple(range(1, 11))
    foreground: bool = False
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Route a single seed into every random component."""
        return dataclasses.replace(
            self,
            phantom=dataclasses.replace(self.phantom, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            eval=dataclasses.replace(self.eval, seed=seed),
        )


_SECTIONS = {"data": DataConfig, "phantom": PhantomSpec, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


def _parse(text: str, annotation: str, default, where: str):
    raw = text.strip()
    try:
        if annotation.startswith("Optional"):
            if raw.lower() in ("none", ""):
                return None
            annotation = annotation[len("Optional[") : -1]
        if annotation == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation == "int":
            return int(raw)
        if annotation == "float":
            return float(raw)
        if annotation == "str":
            return raw
        if annotation == "tuple":
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            sample = default[0] if default else ""
            if isinstance(sample, bool):
                return tuple(p.lower() == "true" for p in parts)
            if isinstance(sample, int):
                return tuple(int(p) for p in parts)
            if isinstance(sample, float):
                return tuple(float(p) for p in parts)
            return tuple(parts)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {annotation}") from exc
    raise ConfigError(f"{where}: unsupported field type {annotation}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for section, cls in _SECTIONS.items():
        defaults = cls()
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        if parser.has_section(section):
            for key, text in parser.items(section):
                if key not in fields:
                    raise ConfigError(f"[{section}] unknown key {key!r}")
                kwargs[key] = _parse(text, str(fields[key].type), getattr(defaults, key), f"[{section}] {key}")
        try:
            parts[section] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    return RunConfig(**parts)


def config_text(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def write_config_echo(cfg: RunConfig, out_dir: Union[str, Path], command: str) -> Path:
    """Resolved config plus a provenance section; the only file carrying a timestamp."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    text = config_text(cfg) + f"\n# provenance\n# command = {command}\n# timestamp = {stamp}\n"
    path = out / "config_echo.ini"
    path.write_text(text)
    return path

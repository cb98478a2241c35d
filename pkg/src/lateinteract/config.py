"""INI configuration: one section per component, ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
import dataclasses
from typing import Iterable

from .ann import AnnConfig
from .encoder import EncoderConfig
from .indexer import IndexerConfig
from .retrieval import RetrievalParams
from .trainer import TrainConfig

SECTIONS = {
    "encoder": EncoderConfig,
    "indexer": IndexerConfig,
    "ann": AnnConfig,
    "retrieval": RetrievalParams,
    "train": TrainConfig,
}


class ConfigError(ValueError):
    pass


def _coerce(cls, name: str, raw: str):
    field = {f.name: f for f in dataclasses.fields(cls)}.get(name)
    if field is None:
        raise ConfigError(f"unknown key {name!r} for section of {cls.__name__}")
    default = field.default
    text = raw.strip()
    if text.lower() in ("", "none") and (default is None or name in ("k_prime", "probes", "train_sample")):
        return None
    if name == "punctuation":
        return frozenset(text)
    if name in ("metric", "mode"):
        return text
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int) or default is None:
            return int(text.replace("_", ""))
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{cls.__name__}.{name}: cannot parse {raw!r}") from None
    return text


class Config:
    """Parsed configuration; :meth:`build` turns a section into its dataclass."""

    def __init__(self, values: dict[str, dict[str, str]] | None = None):
        self.values = {s: dict(v) for s, v in (values or {}).items()}

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "Config":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        values = {s: dict(parser[s]) for s in parser.sections()}
        cfg = cls(values)
        for item in overrides:
            cfg.set(item)
        return cfg

    def set(self, assignment: str) -> None:
        key, sep, value = assignment.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
        self.values.setdefault(section, {})[name] = value

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)

    def build(self, section: str, **extra):
        cls = SECTIONS[section]
        kwargs = {k: _coerce(cls, k, v) for k, v in self.values.get(section, {}).items()}
        kwargs.update({k: v for k, v in extra.items() if v is not None})
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc


def default_ini() -> str:
    """Render every default as an INI document (the shipped example config)."""
    out = []
    for section, cls in SECTIONS.items():
        out.append(f"[{section}]")
        inst = cls()
        for f in dataclasses.fields(cls):
            value = getattr(inst, f.name)
            if isinstance(value, frozenset):
                value = "".join(sorted(value))
            elif hasattr(value, "value"):
                value = value.value
            elif value is None:
                value = "none"
            out.append(f"{f.name} = {value}")
        out.append("")
    return "\n".join(out)

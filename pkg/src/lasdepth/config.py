"""Flat ``key=value`` run configuration.

Keys are ``<section>.<field>`` where the section is one of ``data``,
``scene``, ``net``, ``train`` or ``eval``.  Every key is checked against the
dataclass schema of its section; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from . import io
from .errors import ConfigurationError
from .network import NetworkConfig
from .scene_sim import SceneConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    n_scenes: int = 250
    split_ratio: float = 0.8
    seed: int = 7


@dataclass
class EvalConfig:
    reference_window: int = 5
    refine_window: int = 3
    obstacle_max_height: float = 1.0
    obstacle_min_height: float = 0.05
    obstacle_bearings: int = 64
    obstacle_heights: tuple = (0.2, 0.8)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("data", "scene", "net", "train", "eval")

    def to_flat(self) -> dict[str, str]:
        out = {}
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out[f"{section}.{f.name}"] = _format(getattr(obj, f.name))
        return out

    @classmethod
    def from_flat(cls, items: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        updates: dict[str, dict] = {s: {} for s in cls.SECTIONS}
        for key, raw in items.items():
            section, _, name = key.partition(".")
            if section not in updates:
                raise ConfigurationError(f"unknown config key {key!r}")
            obj = getattr(base, section)
            fields = {f.name: f for f in dataclasses.fields(obj)}
            if name not in fields:
                raise ConfigurationError(f"unknown config key {key!r}")
            try:
                updates[section][name] = _parse(raw, getattr(obj, name))
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"bad value for {key!r}: {raw!r} ({exc})") from None
        kwargs = {}
        for section in cls.SECTIONS:
            obj = getattr(base, section)
            try:
                kwargs[section] = dataclasses.replace(obj, **updates[section])
            except ConfigurationError as exc:
                raise ConfigurationError(f"{section}: {exc}") from None
        return cls(**kwargs)

    def save(self, path) -> None:
        io.write_kv(path, self.to_flat())

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "RunConfig":
        items = io.read_kv(path) if path is not None else {}
        items.update(overrides or {})
        return cls.from_flat(items)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(":".join(str(x) for x in v) if isinstance(v, tuple) else _format(v) for v in value)
    return str(value)


def _parse(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if not raw:
            return ()
        parts = [p.strip() for p in raw.split(",")]
        if default and isinstance(default[0], tuple):
            pairs = []
            for p in parts:
                kind, _, n = p.partition(":")
                pairs.append((kind, int(n)))
            return tuple(pairs)
        if default and isinstance(default[0], float):
            return tuple(float(p) for p in parts)
        return tuple(int(p) for p in parts)
    return raw


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigurationError(f"override {p!r} is not key=value")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out

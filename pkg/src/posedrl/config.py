"""Run configuration: dataclass defaults, a key=value file, command-line overrides.

A config file holds one ``section.field = value`` assignment per line; ``#``
starts a comment. Sections are ``phantom``, ``train``, ``reward``, ``net``,
``eval`` and ``data``; ``out`` and ``seed`` are top-level. Tuples are written
comma-separated, ``none`` clears an optional value.

Later sources win: defaults, then the file, then ``--set`` flags.
"""

from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .errors import ConfigError
from .net import PRESETS, NetConfig, preset
from .phantom import PhantomSpec
from .reward import RewardConfig
from .trainer import TrainConfig


@dataclass
class NetChoice:
    preset: str = "desk"
    graph_comm: bool = True

    def build(self) -> NetConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        return preset(self.preset, graph_comm=self.graph_comm)


@dataclass
class EvalConfig:
    repeats: int = 3
    threshold_mm: float = 10.0
    max_steps: int = 100
    seed: int = 1234


@dataclass
class DataConfig:
    train: str = ""  # manifest of training volumes
    eval: str = ""  # manifest of held-out volumes


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    net: NetChoice = field(default_factory=NetChoice)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs/default"
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        # keep the trainer seed in step with the root seed
        if self.train.seed != self.seed:
            self.train = replace(self.train, seed=self.seed)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_scalar(text: str, kind, key: str):
    if kind is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def parse_value(text: str, hint, key: str = "value"):
    """Convert ``text`` to the type described by annotation ``hint``."""
    text = text.strip()
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() == "none":
            return None
        return parse_value(text, args[0], key)
    if origin is tuple:
        args = typing.get_args(hint)
        parts = [p for p in text.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(p.strip(), args[0], key) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse_scalar(p.strip(), a, key) for p, a in zip(parts, args))
    return _parse_scalar(text, hint, key)


def _section_hints(obj) -> dict:
    return typing.get_type_hints(type(obj))


def parse_assignments(lines, source: str = "config") -> list[tuple[str, str]]:
    out = []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        out.append((key.strip(), value.strip()))
    return out


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Return a copy of ``cfg`` with every ``(dotted key, text)`` assignment applied in order."""
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg) if is_dataclass(getattr(cfg, f.name))}
    top = {}
    for key, text in assignments:
        name, dot, attr = key.partition(".")
        if not dot:
            hints = typing.get_type_hints(RunConfig)
            if name not in hints or name in sections:
                raise ConfigError(f"unknown setting {key!r}")
            top[name] = parse_value(text, hints[name], key)
            continue
        if name not in sections:
            raise ConfigError(f"unknown section in {key!r}; sections are {sorted(sections)}")
        hints = _section_hints(sections[name])
        if attr not in hints or attr not in {f.name for f in fields(sections[name])}:
            raise ConfigError(f"unknown setting {key!r}")
        value = parse_value(text, hints[attr], key)
        try:
            sections[name] = replace(sections[name], **{attr: value})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
        if name == "train" and attr == "seed":
            top["seed"] = value
    merged = {**sections, **top}
    if "seed" in top:
        merged["train"] = replace(merged["train"], seed=top["seed"])
    try:
        return RunConfig(**merged, **{k: getattr(cfg, k) for k in ("out", "seed", "checkpoint_every")
                                      if k not in merged})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides`` ("key=value" strings)."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = apply_overrides(cfg, parse_assignments(text.splitlines(), str(path)))
    if overrides:
        cfg = apply_overrides(cfg, parse_assignments(overrides, "--set"))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Inverse of :func:`load_config` for every non-default-independent field."""
    lines = []

    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(fmt(x) for x in v)
        return str(v)

    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if is_dataclass(value):
            for g in fields(value):
                lines.append(f"{f.name}.{g.name} = {fmt(getattr(value, g.name))}")
        else:
            lines.append(f"{f.name} = {fmt(value)}")
    return "\n".join(lines) + "\n"


__all__ = ["RunConfig", "NetChoice", "EvalConfig", "DataConfig", "load_config", "apply_overrides",
           "parse_assignments", "parse_value", "dump_config"]

"""YAML run configuration with schema validation.

A config file looks like::

    schema_version: 1
    seed: 0
    mode: beamlora
    out: runs/default
    task:   {dims: [32, 32], sigmas: [...], n_train: 128, ...}
    model:  {r: 8, scale: rank, init_std: 0.02, dtype: float64}
    optim:  {lr: 0.01, steps: 600, batch_size: 64, ...}
    beam:   {p_init: 0.95, delta_t: 80, op_window_end: 400}
    logging: {importance_every: 0, eval_every: 1}

Omitted keys take their defaults. Unknown keys and mistyped values raise
:class:`ConfigError` with the offending line.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from beamlora.beam import BeamSchedule
from beamlora.tasks import TRAIN_MODES, OptimConfig, TaskConfig

SCHEMA_VERSION = 1
OUT_ROOT_ENV = "BEAMLORA_OUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass
class ModelSpec:
    r: int = 8
    scale: float | str = "rank"
    init_std: float = 0.02
    dtype: str = "float64"


@dataclass
class BeamSpec:
    p_init: float = 0.95
    delta_t: int = 80
    op_window_end: int | None = 400


@dataclass
class LoggingSpec:
    importance_every: int = 0
    eval_every: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "beamlora"
    out: str = "runs/default"
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    beam: BeamSpec = field(default_factory=BeamSpec)
    logging: LoggingSpec = field(default_factory=LoggingSpec)
    schema_version: int = SCHEMA_VERSION

    def schedule(self) -> BeamSchedule | None:
        if self.mode == "lora":
            return None
        return BeamSchedule(self.beam.p_init, self.beam.delta_t, self.optim.steps, self.beam.op_window_end)

    def out_dir(self) -> Path:
        out = Path(self.out)
        root = os.environ.get(OUT_ROOT_ENV)
        return out if out.is_absolute() or not root else Path(root) / out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {"schema_version": d.pop("schema_version"), **d}

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


_SECTIONS = {"task": TaskConfig, "model": ModelSpec, "optim": OptimConfig, "beam": BeamSpec, "logging": LoggingSpec}


def _line(node) -> int:
    return node.start_mark.line + 1


def _check_type(name: str, value, expected, node, source):
    """``expected`` is the dataclass field annotation as a string."""
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "list[int]": lambda v: isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v),
        "list[float]": lambda v: isinstance(v, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v),
        "float | str": lambda v: isinstance(v, str) or (isinstance(v, (int, float)) and not isinstance(v, bool)),
        "int | None": lambda v: v is None or (isinstance(v, int) and not isinstance(v, bool)),
    }[expected]
    if not ok(value):
        raise ConfigError(f"{name}: expected {expected}, got {value!r}", _line(node), source)
    if expected == "float":
        return float(value)
    if expected == "list[float]":
        return [float(x) for x in value]
    return value


def _build(cls, mapping: dict, node, prefix: str, source: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    key_nodes = {k.value: (k, v) for k, v in node.value} if node is not None else {}
    for key, value in mapping.items():
        knode, vnode = key_nodes[key]
        if key not in fields:
            raise ConfigError(f"unknown key {prefix}{key!r}; allowed: {sorted(fields)}", _line(knode), source)
        kwargs[key] = _check_type(prefix + key, value, fields[key].type, vnode, source)
    return cls(**kwargs)


def loads(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None, source) from None
    if not isinstance(data, dict) or root is None:
        raise ConfigError("top level must be a mapping", 1, source)
    nodes = {k.value: (k, v) for k, v in root.value}
    if "schema_version" not in data:
        raise ConfigError("missing required key 'schema_version'", 1, source)
    if data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {data['schema_version']!r} (expected {SCHEMA_VERSION})",
                          _line(nodes["schema_version"][1]), source)

    kwargs = {}
    top = {"seed": "int", "mode": "str", "out": "str"}
    for key, value in data.items():
        knode, vnode = nodes[key]
        if key == "schema_version":
            continue
        if key in top:
            kwargs[key] = _check_type(key, value, top[key], vnode, source)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping", _line(vnode), source)
            kwargs[key] = _build(_SECTIONS[key], value, vnode, f"{key}.", source)
        else:
            raise ConfigError(f"unknown key {key!r}", _line(knode), source)
    cfg = RunConfig(**kwargs)
    _validate(cfg, nodes, source)
    return cfg


def _validate(cfg: RunConfig, nodes: dict, source: str) -> None:
    def fail(msg, section):
        line = _line(nodes[section][0]) if section in nodes else None
        raise ConfigError(msg, line, source)

    if cfg.mode not in TRAIN_MODES:
        fail(f"mode must be one of {TRAIN_MODES}, got {cfg.mode!r}", "mode")
    if cfg.model.dtype not in ("float64", "float32"):
        fail(f"model.dtype must be float64 or float32, got {cfg.model.dtype!r}", "model")
    if isinstance(cfg.model.scale, str) and cfg.model.scale != "rank":
        fail(f"model.scale must be a number or 'rank', got {cfg.model.scale!r}", "model")
    if cfg.model.r < 1 or cfg.model.r > min(cfg.task.dims):
        fail(f"model.r={cfg.model.r} must lie in [1, {min(cfg.task.dims)}]", "model")
    if cfg.optim.steps < 1 or cfg.optim.batch_size < 1:
        fail("optim.steps and optim.batch_size must be positive", "optim")
    if cfg.optim.lr_schedule not in ("constant", "cosine"):
        fail(f"optim.lr_schedule must be constant or cosine, got {cfg.optim.lr_schedule!r}", "optim")
    for section, check in (("task", cfg.task.validate), ("beam", cfg.schedule)):
        try:
            check()
        except ValueError as exc:
            fail(str(exc), section)


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    return loads(text, str(path))

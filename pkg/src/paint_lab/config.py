"""Training configuration: nested dataclasses with JSON round-tripping and validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from paint_lab.calibration import CalibrationConfig
from paint_lab.losses import LossConfig
from paint_lab.masking import DEFAULT_MARKER, PLACEMENTS, make_schedule
from paint_lab.tasks import BaseSpec, DatasetSpec
from paint_lab.views import TEACHER_MODES

METHODS = ("paint", "opsd", "sft", "none")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass(frozen=True)
class MaskConfig:
    rho_wrong: float = 0.30
    rho_correct: float = 0.40
    placement: str = "suffix"
    marker: str = DEFAULT_MARKER

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.rho_correct < self.rho_wrong:
            raise ValueError("rho_correct must be at least rho_wrong")
        make_schedule(self.rho_wrong, self.rho_correct)

    @property
    def schedule(self):
        return make_schedule(self.rho_wrong, self.rho_correct)


@dataclass(frozen=True)
class TeacherSpec:
    mode: str = "energy_tilt"
    beta_tilt: float = 2.0

    def __post_init__(self):
        if self.mode not in TEACHER_MODES:
            raise ValueError(f"mode must be one of {TEACHER_MODES}, got {self.mode!r}")
        if not (math.isfinite(self.beta_tilt) and self.beta_tilt >= 0):
            raise ValueError("beta_tilt must be finite and nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "paint"
    seed: int = 0
    steps: int = 100
    batch_size: int = 8
    lr: float = 0.5
    eval_interval: int = 20
    eval_k: int = 8
    temperature: float = 1.1
    distill_temperature: float = 1.0
    max_len: int = 64
    order: int = 3
    trace_calibration: bool = False
    mask: MaskConfig = field(default_factory=MaskConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    base: BaseSpec = field(default_factory=BaseSpec)
    data: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        positive = ("batch_size", "eval_interval", "eval_k", "max_len")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "temperature", "distill_temperature"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name}: must be positive and finite, got {v}")
        if self.steps < 0:
            raise ConfigError(f"steps: must be >= 0, got {self.steps}")
        if self.order < 0:
            raise ConfigError(f"order: must be >= 0, got {self.order}")

    def to_dict(self) -> dict:
        return _encode(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"mask.rho_wrong": 0.25})``."""
        return TrainConfig.from_dict(_apply(self.to_dict(), changes))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d, "")

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())


def _encode(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _decode_float(v: Any, path: str) -> float:
    if isinstance(v, str) and v in ("inf", "+inf", "infinity"):
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {v!r}")
    return float(v)


def _build(cls, d: Any, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix.rstrip('.') or '<root>'}: expected an object, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = set(d) - set(fields)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"{prefix}{name}: unknown field")
    kwargs = {}
    for name, value in d.items():
        path = prefix + name
        default = _default_of(fields[name])
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path + ".")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected true/false, got {value!r}")
            kwargs[name] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
            kwargs[name] = value
        elif isinstance(default, float):
            kwargs[name] = _decode_float(value, path)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{path}: expected a string, got {value!r}")
            kwargs[name] = value
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{_guess_field(str(exc), fields, prefix)}: {exc}") from None


def _guess_field(message: str, fields: dict, prefix: str) -> str:
    for name in sorted(fields, key=len, reverse=True):
        if name in message:
            return prefix + name
    return prefix.rstrip(".") or "<root>"


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _apply(d: dict, changes: dict) -> dict:
    out = json.loads(json.dumps(d))
    for dotted, value in changes.items():
        node = out
        parts = dotted.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"{dotted}: unknown field")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"{dotted}: unknown field")
        node[parts[-1]] = _encode(value)
    return out

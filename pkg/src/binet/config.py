"""Run configuration: flat ``key=value`` text (or a JSON object) with validation.

Example::

    # desk-scale MNIST run
    model=cnn4
    dataset=mnist
    epochs=30
    estimator=dte
    clamp_mode=active-region
    epsilon=0.1
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

from .dte import CLAMP_MODES, ESTIMATOR_MODES
from .model import BINARIZERS, ZOO


class ConfigError(ValueError):
    category = "config"


@dataclass(frozen=True)
class RunConfig:
    model: str = "cnn4"
    dataset: str = "mnist"
    data_dir: str = ""
    epochs: int = 30
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    estimator: str = "dte"
    clamp_mode: str = "literal"
    epsilon: float = 0.1
    t_min: float = 0.1
    t_max: float = 10.0
    delta: float = 0.1
    binarizer: str = "imb"
    width: int = 0  # 0 keeps the model's default width
    augment: bool = False
    train_limit: int = 0  # 0 uses the whole split
    test_limit: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in ZOO:
            raise ConfigError(f"model must be one of {sorted(ZOO)}, got {self.model!r}")
        if not (self.dataset in ("mnist", "cifar10") or self.dataset.startswith("synth:")):
            raise ConfigError(f"dataset must be mnist, cifar10 or synth:<kind>, got {self.dataset!r}")
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("width", "train_limit", "test_limit", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.estimator not in ESTIMATOR_MODES:
            raise ConfigError(f"estimator must be one of {ESTIMATOR_MODES}")
        if self.clamp_mode not in CLAMP_MODES:
            raise ConfigError(f"clamp_mode must be one of {CLAMP_MODES}")
        if self.binarizer not in BINARIZERS:
            raise ConfigError(f"binarizer must be one of {BINARIZERS}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if not 0.0 < self.t_min < self.t_max:
            raise ConfigError("need 0 < t_min < t_max")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if not self.out:
            raise ConfigError("out must be a non-empty path")

    # -- conversions -------------------------------------------------------
    def estimator_kwargs(self) -> dict:
        return {
            "mode": self.estimator,
            "clamp_mode": self.clamp_mode,
            "epsilon": self.epsilon,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "delta": self.delta,
        }

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        return replace(self, **coerce_values(overrides))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, value: Any):
    typ = _FIELD_TYPES[key]
    if typ in ("bool", bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if typ in ("int", int):
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if f != int(f):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(f)
    if typ in ("float", float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return str(value)


def coerce_values(raw: dict[str, Any]) -> dict[str, Any]:
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _coerce(k, v) for k, v in raw.items()}


def parse_config(text: str) -> RunConfig:
    """Parse a flat ``key=value`` body or a JSON object; unknown keys are errors."""
    body = text.strip()
    if body.startswith("{"):
        try:
            raw = json.loads(body)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON config: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("JSON config must be an object")
    else:
        raw = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            k = k.strip()
            if k in raw:
                raise ConfigError(f"line {n}: duplicate key {k!r}")
            raw[k] = v.strip()
    return RunConfig(**coerce_values(raw))


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None

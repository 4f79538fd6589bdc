"""Flat ``key = value`` run configuration.

One key space covers the detector, the scene generator, the optimizer and
the run itself. ``image_size`` and ``classes`` feed both the detector and the
scenes. ``data_seed`` is the scene generator seed; ``seed`` drives parameter
init and shuffling.

File syntax::

    # comment
    placement = before
    dsa_levels = 4-7        # ranges, or comma/space separated lists
    with_confidence = true

Overrides (``--set key=value``) are applied after the file, in order, so the
last one wins. A key repeated inside the file keeps its last value and logs
a warning. Values are typed after the defaults below.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .detector.model import DetectorConfig
from .detector.train import OptimizerConfig
from .scenes import SceneConfig

log = logging.getLogger(__name__)

_SHARED = ("image_size", "classes")

RUN_DEFAULTS: dict = {
    "name": "run",
    "seed": 0,
    "data_seed": 0,
    "n_train": 500,
    "n_val": 100,
    "data_dir": "",
    "eval_every": 0,
}

# SGD with momentum and a little weight decay; plain SGD barely moves AP at this budget
OPTIMIZER_DEFAULTS = {f.name: f.default for f in fields(OptimizerConfig)} | {"momentum": 0.9, "weight_decay": 1e-4}
DETECTOR_DEFAULTS = {f.name: f.default for f in fields(DetectorConfig)}
SCENE_DEFAULTS = {f.name: f.default for f in fields(SceneConfig) if f.name != "seed"}

DEFAULTS: dict = {**DETECTOR_DEFAULTS, **SCENE_DEFAULTS, **OPTIMIZER_DEFAULTS, **RUN_DEFAULTS}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def parse_int_set(text: str) -> tuple[int, ...]:
    """``"4-7"`` -> (4, 5, 6, 7); also ``"3,5"``, ``"3 5"``, ``"3-4,6"`` and ``""``."""
    out: set[int] = set()
    for part in text.replace(",", " ").split():
        lo, sep, hi = part.partition("-")
        if sep:
            a, b = int(lo), int(hi)
            if b < a:
                raise ValueError(f"descending range {part!r}")
            out.update(range(a, b + 1))
        else:
            out.add(int(part))
    return tuple(sorted(out))


def coerce(key: str, raw) -> object:
    """Convert ``raw`` (text or JSON value) to the type of ``DEFAULTS[key]``."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if isinstance(default, tuple):
        if isinstance(raw, (list, tuple)):
            return tuple(sorted({int(v) for v in raw}))
        return parse_int_set(str(raw))
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        if isinstance(raw, float) and not raw.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(raw) if not isinstance(raw, str) else int(raw.strip())
    if isinstance(default, float):
        return float(raw)
    return str(raw).strip()


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def detector(self) -> DetectorConfig:
        return DetectorConfig(**{k: self.values[k] for k in DETECTOR_DEFAULTS})

    def scene(self) -> SceneConfig:
        return SceneConfig(**{k: self.values[k] for k in SCENE_DEFAULTS}, seed=self.values["data_seed"])

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(**{k: self.values[k] for k in OPTIMIZER_DEFAULTS})

    def validate(self) -> "RunConfig":
        try:
            self.detector()
            self.scene()
        except ValueError as e:
            raise ConfigError(f"invalid config: {e}") from None
        v = self.values
        if v["image_size"] % 8:
            raise ConfigError(f"invalid config: image_size must be a multiple of 8, got {v['image_size']}")
        if v["n_train"] < 1 or v["n_val"] < 1:
            raise ConfigError("invalid config: n_train and n_val must be >= 1")
        if v["epochs"] < 0 or v["batch_size"] < 1 or v["lr"] < 0:
            raise ConfigError("invalid config: need epochs >= 0, batch_size >= 1, lr >= 0")
        return self

    def with_overrides(self, overrides: dict) -> "RunConfig":
        vals = dict(self.values)
        for k, v in overrides.items():
            vals[k] = coerce(k, v)
        return RunConfig(vals).validate()

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}

    def to_text(self) -> str:
        lines = []
        for k, v in self.values.items():
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_text(text: str, source: str = "<config>") -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            value = coerce(key, raw.strip())
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
        if key in out:
            log.warning("%s:%d: duplicate key %r, last value wins", source, lineno, key)
        out[key] = value
    return out


def parse_override(item: str) -> tuple[str, str]:
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r} in override")
    return key, raw.strip()


def parse_config(path=None, overrides: Sequence[str] | dict = ()) -> RunConfig:
    """Defaults, then the file (text or a run-report JSON), then overrides."""
    vals = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
        if p.suffix == ".json":
            vals.update(_from_json(text, str(p)))
        else:
            vals.update(parse_text(text, str(p)))
    items = overrides.items() if isinstance(overrides, dict) else (parse_override(o) for o in overrides)
    for key, raw in items:
        try:
            vals[key] = coerce(key, raw)
        except ValueError as e:
            raise ConfigError(f"override {key}: {e}") from None
    return RunConfig(vals).validate()


def _from_json(text: str, source: str) -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}: malformed JSON: {e.msg}") from None
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a JSON object or a run report with a 'config' key")
    out = {}
    for k, v in data.items():
        try:
            out[k] = coerce(k, v)
        except ConfigError:
            raise ConfigError(f"{source}: unknown config key {k!r}") from None
        except ValueError as e:
            raise ConfigError(f"{source}: bad value for {k}: {e}") from None
    return out

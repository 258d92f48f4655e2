"""JSON experiment configuration: schema checks, defaults and the resolved echo.

A config file has up to four sections::

    {
      "model":  {... ModelConfig fields, "module": {... ConvModuleConfig}},
      "train":  {... TrainConfig fields, "optimizer": {... AdamConfig}},
      "decode": {"beam": 4, "alpha": 0.0, "max_len": null},
      "data":   {"task": "copy", "max_len": 20}  or  {"corpus": {...}}
    }

Unknown keys anywhere are rejected. Errors carry the dotted field path and,
when the config came from a file, the line the offending key sits on.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .convops import Mode
from .decoding import DecodeConfig
from .errors import ConfigurationError
from .layers import ConvModuleConfig
from .model import ModelConfig
from .training import TASKS, AdamConfig, TrainConfig


@dataclass
class CorpusConfig:
    train_src: str = ""
    train_tgt: str = ""
    eval_src: str = ""
    eval_tgt: str = ""
    min_count: int = 1
    repeat: bool = True

    def __post_init__(self):
        for name in ("train_src", "train_tgt", "eval_src", "eval_tgt"):
            if not getattr(self, name):
                raise ConfigurationError(f"{name} is required for corpus data")
        if self.min_count < 1:
            raise ConfigurationError(f"min_count must be >= 1, got {self.min_count}")


@dataclass
class DataConfig:
    task: Optional[str] = "copy"
    max_len: int = 20
    min_len: int = 1
    grammar_seed: int = 0
    # held-out batches are drawn from seed + eval_seed_offset
    eval_seed_offset: int = 1_000_003
    corpus: Optional[CorpusConfig] = None

    def __post_init__(self):
        if self.corpus is not None:
            self.task = None
        elif self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigurationError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return _plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=int(seed)))


# nested dataclass fields, keyed by (owner, field name)
_NESTED = {
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "decode"): DecodeConfig,
    (ExperimentConfig, "data"): DataConfig,
    (ModelConfig, "module"): ConvModuleConfig,
    (TrainConfig, "optimizer"): AdamConfig,
    (DataConfig, "corpus"): CorpusConfig,
}

_PAIR_LISTS = {(ModelConfig, "attention_steps"), (ConvModuleConfig, "steps")}
_INT_LISTS = {(ModelConfig, "groups"), (ConvModuleConfig, "residual_after")}
_FLOAT_OPT = {(ModelConfig, "logit_scale"), (TrainConfig, "target_accuracy")}
_INT_OPT = {(DecodeConfig, "max_len")}
_STR_OPT = {(DataConfig, "task")}


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


class _Locator:
    """Maps a key name back to a line of the source text (best effort)."""

    def __init__(self, text: Optional[str], origin: str):
        self.lines = text.splitlines() if text else []
        self.origin = origin

    def where(self, path: str) -> str:
        key = path.rsplit(".", 1)[-1]
        pat = re.compile(r'"' + re.escape(key) + r'"\s*:')
        for i, line in enumerate(self.lines, start=1):
            if pat.search(line):
                return f"{self.origin}:{i}: {path}"
        return f"{self.origin}: {path}"


def _check_type(owner, name: str, value: Any, path: str, loc: _Locator) -> Any:
    def fail(what):
        raise ConfigurationError(f"{loc.where(path)}: expected {what}, got {value!r}")

    def is_int(v):
        return isinstance(v, int) and not isinstance(v, bool)

    def is_num(v):
        return is_int(v) or isinstance(v, float)

    key = (owner, name)
    if key in _PAIR_LISTS:
        if not isinstance(value, list) or not all(
            isinstance(p, list) and len(p) == 2 and all(is_int(v) for v in p) for p in value
        ):
            fail("a list of [k, d] integer pairs")
        return [tuple(p) for p in value]
    if key in _INT_LISTS:
        if not isinstance(value, list) or not all(is_int(v) for v in value):
            fail("a list of integers")
        return list(value)
    if key in _FLOAT_OPT:
        if value is not None and not is_num(value):
            fail("a number or null")
        return value
    if key in _INT_OPT:
        if value is not None and not is_int(value):
            fail("an integer or null")
        return value
    if key in _STR_OPT:
        if value is not None and not isinstance(value, str):
            fail("a string or null")
        return value
    default = next(f for f in dataclasses.fields(owner) if f.name == name)
    sample = default.default if default.default is not dataclasses.MISSING else default.default_factory()
    if isinstance(sample, bool):
        if not isinstance(value, bool):
            fail("true or false")
    elif isinstance(sample, Mode):
        if not isinstance(value, str):
            fail("a mode name")
    elif isinstance(sample, int):
        if not is_int(value):
            fail("an integer")
    elif isinstance(sample, float):
        if not is_num(value):
            fail("a number")
        value = float(value)
    elif isinstance(sample, str):
        if not isinstance(value, str):
            fail("a string")
    return value


def _build(cls, raw: Any, path: str, loc: _Locator):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{loc.where(path) if path else loc.origin}: expected a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    for k in raw:
        if k not in known:
            p = f"{path}.{k}" if path else k
            raise ConfigurationError(f"{loc.where(p)}: unknown key (allowed: {', '.join(sorted(known))})")
    kwargs = {}
    for k, v in raw.items():
        p = f"{path}.{k}" if path else k
        nested = _NESTED.get((cls, k))
        if nested is not None and v is not None:
            kwargs[k] = _build(nested, v, p, loc)
        else:
            kwargs[k] = _check_type(cls, k, v, p, loc)
    try:
        return cls(**kwargs)
    except ConfigurationError as e:
        raise ConfigurationError(f"{loc.where(path) if path else loc.origin}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{loc.where(path) if path else loc.origin}: {e}") from None


def from_dict(raw: dict, origin: str = "<config>", text: Optional[str] = None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "", _Locator(text, origin))
    data = cfg.data
    if data.task is not None and cfg.model.vocab_src != cfg.model.vocab_tgt:
        raise ConfigurationError(
            f"{origin}: synthetic task {data.task!r} needs model.vocab_src == model.vocab_tgt, "
            f"got {cfg.model.vocab_src} and {cfg.model.vocab_tgt}"
        )
    return cfg


def loads(text: str, origin: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{origin}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    return from_dict(raw, origin, text)


def load(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config {p}: {e.strerror or e}") from None
    return loads(text, str(p))

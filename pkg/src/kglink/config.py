"""Training configuration: schema, validation, flat dotted-key text dialect
and shipped presets.

The text dialect is a flat TOML subset, one ``dotted.key = value`` per line::

    model.type = "ComplEx"
    optimizer.learning_rate = 0.417
    negsamp.neg_subjects = 3

Keys under ``reported.``, ``rules.``, ``classifier.`` and ``hpo.`` are
passed through untouched; any other unknown key is an error.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .models import INIT_FAMILIES, MODEL_NAMES, InitSpec, ModelKind

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TRAINING_TYPES = ("1vsAll", "NegSamp")
OPTIMIZERS = ("Adam", "Adagrad")
BATCH_SIZES = (128, 256, 512, 1024)
REGULARIZERS = ("None", "L1", "F2", "N3")
PASSTHROUGH = ("reported.", "rules.", "classifier.", "hpo.")


@dataclass(frozen=True)
class Field:
    key: str
    attr: str
    type: type
    default: object
    choices: tuple | None = None
    low: float | None = None
    high: float | None = None

    def check(self, value) -> str | None:
        if self.type is bool:
            if not isinstance(value, bool):
                return f"{self.key}: expected true/false, got {value!r}"
            return None
        if self.type is int and (isinstance(value, bool) or not isinstance(value, int)):
            if not (isinstance(value, float) and value.is_integer()):
                return f"{self.key}: expected an integer, got {value!r}"
        if self.type is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
            return f"{self.key}: expected a number, got {value!r}"
        if self.type is str and not isinstance(value, str):
            return f"{self.key}: expected a string, got {value!r}"
        if self.choices is not None and value not in self.choices:
            shown = "{" + ", ".join(str(c) for c in self.choices) + "}"
            return f"{self.key}: {value!r} not in {shown}"
        if self.low is not None and not value >= self.low:
            return f"{self.key}: {value!r} outside [{self.low}, {self.high}]"
        if self.high is not None and not value <= self.high:
            return f"{self.key}: {value!r} outside [{self.low}, {self.high}]"
        return None


SCHEMA = (
    Field("model.type", "model", str, "ComplEx", MODEL_NAMES),
    Field("model.norm", "norm", int, 2, (1, 2)),
    Field("embedding_size", "embedding_size", int, 128, low=1, high=1 << 16),
    Field("training_type", "training_type", str, "1vsAll", TRAINING_TYPES),
    Field("negsamp.neg_subjects", "neg_subjects", int, 1, low=1, high=100),
    Field("negsamp.neg_objects", "neg_objects", int, 1, low=1, high=100),
    Field("max_epochs", "max_epochs", int, 200, low=1, high=100000),
    Field("reciprocal", "reciprocal", bool, False),
    Field("loss", "loss", str, "CE", ("CE",)),
    Field("optimizer.type", "optimizer", str, "Adagrad", OPTIMIZERS),
    Field("optimizer.batch_size", "batch_size", int, 128, BATCH_SIZES),
    Field("optimizer.learning_rate", "learning_rate", float, 0.1, low=0.0003, high=1.0),
    Field("optimizer.scheduler_patience", "scheduler_patience", int, 10, low=0, high=10),
    Field("regularization.type", "regularizer", str, "None", REGULARIZERS),
    Field("regularization.entity_weight", "entity_weight", float, 1e-10, low=1e-20, high=1e-1),
    Field("regularization.relation_weight", "relation_weight", float, 1e-10, low=1e-20, high=1e-1),
    Field("regularization.frequency_weighting", "frequency_weighting", bool, False),
    Field("dropout.entity", "dropout_entity", float, 0.0, low=-0.5, high=0.5),
    Field("dropout.relation", "dropout_relation", float, 0.0, low=-0.5, high=0.5),
    Field("init.type", "init_type", str, "Normal", INIT_FAMILIES),
    Field("init.normal_mean", "normal_mean", float, 0.0, low=0.0, high=0.0),
    Field("init.normal_std", "normal_std", float, 0.1, low=0.00001, high=1.0),
    Field("init.uniform_lower_bound", "uniform_lower_bound", float, -0.1, low=-1.0, high=-0.00001),
    Field("init.xavier_uniform_gain", "xavier_uniform_gain", float, 1.0, low=1.0, high=1.0),
    Field("init.xavier_normal_gain", "xavier_normal_gain", float, 1.0, low=1.0, high=1.0),
    Field("scheduler.factor", "scheduler_factor", float, 0.95, low=1e-6, high=1.0),
    Field("valid.every", "valid_every", int, 5, low=1, high=100000),
    Field("valid.early_stopping_patience", "early_stopping_patience", int, 0, low=0, high=100000),
    Field("seed", "seed", int, 0, low=0, high=2 ** 63 - 1),
    Field("workers", "workers", int, 1, low=1, high=1024),
)
_BY_KEY = {f.key: f for f in SCHEMA}
_BY_ATTR = {f.attr: f for f in SCHEMA}


@dataclass(frozen=True)
class TrainConfig:
    model: str = "ComplEx"
    norm: int = 2
    embedding_size: int = 128
    training_type: str = "1vsAll"
    neg_subjects: int = 1
    neg_objects: int = 1
    max_epochs: int = 200
    reciprocal: bool = False
    loss: str = "CE"
    optimizer: str = "Adagrad"
    batch_size: int = 128
    learning_rate: float = 0.1
    scheduler_patience: int = 10
    regularizer: str = "None"
    entity_weight: float = 1e-10
    relation_weight: float = 1e-10
    frequency_weighting: bool = False
    dropout_entity: float = 0.0
    dropout_relation: float = 0.0
    init_type: str = "Normal"
    normal_mean: float = 0.0
    normal_std: float = 0.1
    uniform_lower_bound: float = -0.1
    xavier_uniform_gain: float = 1.0
    xavier_normal_gain: float = 1.0
    scheduler_factor: float = 0.95
    valid_every: int = 5
    early_stopping_patience: int = 0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        issues = self.issues()
        if issues:
            raise ConfigError(issues)

    def issues(self) -> list[str]:
        out = []
        for f in fields(self):
            msg = _BY_ATTR[f.name].check(getattr(self, f.name))
            if msg:
                out.append(msg)
        return out

    @property
    def kind(self) -> ModelKind:
        return ModelKind(self.model, self.norm)

    @property
    def init(self) -> InitSpec:
        gain = self.xavier_normal_gain if self.init_type == "XavierNormal" else self.xavier_uniform_gain
        return InitSpec(self.init_type, std=self.normal_std, lower=self.uniform_lower_bound,
                        mean=self.normal_mean, gain=gain)

    def replace(self, **changes) -> "TrainConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return TrainConfig(**data)

    def to_flat(self) -> dict:
        return {f.key: getattr(self, f.attr) for f in SCHEMA}

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        issues = validate_flat(flat)
        if issues:
            raise ConfigError(issues)
        kwargs = {}
        for key, value in flat.items():
            f = _BY_KEY.get(key)
            if f is None:
                continue
            if f.type is float:
                value = float(value)
            elif f.type is int:
                value = int(value)
            kwargs[f.attr] = value
        return cls(**kwargs)

    def dumps(self) -> str:
        return dumps_flat(self.to_flat())


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in tree.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, full + "."))
        else:
            out[full] = value
    return out


def parse_flat(text: str) -> dict:
    try:
        return flatten(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"config syntax: {exc}"]) from None


def _literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (int, str)):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_literal(v) for v in value) + "]"
    raise TypeError(f"cannot serialise {value!r}")


def dumps_flat(flat: dict) -> str:
    return "".join(f"{k} = {_literal(v)}\n" for k, v in flat.items())


def parse_override(item: str) -> tuple[str, object]:
    """``key=value`` from a command-line flag; the value is read as a TOML
    literal, falling back to a bare string."""
    if "=" not in item:
        raise ConfigError([f"override {item!r}: expected key=value"])
    key, raw = (x.strip() for x in item.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def validate_flat(flat: dict) -> list[str]:
    issues = []
    for key, value in flat.items():
        f = _BY_KEY.get(key)
        if f is None:
            if not key.startswith(PASSTHROUGH):
                issues.append(f"{key}: unknown key")
            continue
        msg = f.check(value)
        if msg:
            issues.append(msg)
    return issues


def validate_config(text) -> list[str]:
    """Every problem in a config text (or flat dict), each naming its key and
    the permitted values. An empty list means the config is valid."""
    if isinstance(text, dict):
        flat = text
    else:
        try:
            flat = parse_flat(text)
        except ConfigError as exc:
            return exc.issues
    issues = validate_flat(flat)
    if not issues:
        try:
            TrainConfig.from_flat(flat)
        except ConfigError as exc:
            issues = exc.issues
    return issues


def load_config(text: str, overrides: dict | None = None) -> TrainConfig:
    flat = parse_flat(text)
    flat.update(overrides or {})
    return TrainConfig.from_flat(flat)


def preset_names() -> list[str]:
    root = resources.files("kglink") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def preset_text(name: str) -> str:
    path = resources.files("kglink") / "presets" / f"{name}.toml"
    if not path.is_file():
        raise ConfigError([f"preset {name!r} not found; available: {preset_names()}"])
    return path.read_text(encoding="utf-8")


def load_preset(name: str, overrides: dict | None = None) -> TrainConfig:
    return load_config(preset_text(name), overrides)


def read_flat(path) -> dict:
    return parse_flat(Path(path).read_text(encoding="utf-8"))

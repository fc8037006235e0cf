"""Run configuration: YAML file with ``gen``, ``train`` and ``eval`` sections plus overrides."""
from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigurationError, UsageError
from .evalkit import SCORE_METRICS
from .synthdata import GenConfig
from .trainer import TrainConfig

SECTIONS = ("gen", "train", "eval")


@dataclass(frozen=True)
class EvalConfig:
    far: tuple = (0.1,)
    c_fr: float = 1.0
    c_fa: float = 1.0
    p_target: float = 0.05
    score_metric: str = None  # None: cosine for angular checkpoints, neg_sq_euclidean otherwise
    domains: str = "all"

    def validate(self):
        if self.score_metric is not None and self.score_metric not in SCORE_METRICS:
            raise ConfigurationError(f"score_metric must be one of {SCORE_METRICS}")
        if self.domains not in ("in", "out", "all"):
            raise ConfigurationError("domains must be 'in', 'out' or 'all'")
        if not all(0 <= f <= 1 for f in self.far):
            raise ConfigurationError("far points must lie in [0, 1]")
        if not 0 < self.p_target < 1 or self.c_fr <= 0 or self.c_fa <= 0:
            raise ConfigurationError("DCF parameters out of range")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "far" in d:
            far = d["far"]
            d["far"] = tuple(float(f) for f in (far if isinstance(far, (list, tuple)) else [far]))
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        ev = asdict(self.eval)
        ev["far"] = list(self.eval.far)
        return {"gen": asdict(self.gen), "train": self.train.to_dict(), "eval": ev}

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    def validate(self):
        self.gen.validate()
        self.train.validate()
        self.eval.validate()
        return self


_CLASSES = {"gen": GenConfig, "train": TrainConfig, "eval": EvalConfig}


def _coerce(section, key, value):
    """Cast scalars to the type of the field default (YAML reads ``1e-3`` as a string)."""
    default = {f.name: f.default for f in fields(_CLASSES[section])}[key]
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError("expected true/false")
            return value
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{section}.{key}: bad value {value!r} ({exc})") from None
    return value


def _merge(base, section, values, source):
    known = {f.name for f in fields(_CLASSES[section])}
    for key, value in values.items():
        if key not in known:
            raise UsageError(f"{source}: unknown key {section}.{key}")
        base[section][key] = _coerce(section, key, value)


def load_config(path=None, overrides=()):
    """Build a RunConfig from an optional YAML file and ``section.key=value`` overrides."""
    raw = {s: {} for s in SECTIONS}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise UsageError(f"{path}: top level must be a mapping")
        for section, values in data.items():
            if section not in SECTIONS:
                raise UsageError(f"{path}: unknown section {section!r}")
            if not isinstance(values, dict):
                raise UsageError(f"{path}: section {section!r} must be a mapping")
            _merge(raw, section, values, path)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise UsageError(f"override {item!r} must look like section.key=value")
        _merge(raw, section, {name: yaml.safe_load(value)}, "override")
    try:
        config = RunConfig(
            GenConfig.from_dict(raw["gen"]),
            TrainConfig.from_dict(raw["train"]),
            EvalConfig.from_dict(raw["eval"]),
        )
        return config.validate()
    except (TypeError, ConfigurationError) as exc:
        raise UsageError(str(exc)) from None

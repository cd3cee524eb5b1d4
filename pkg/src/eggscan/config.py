"""Pipeline configuration: a single JSON document; command-line flags override file values."""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentSpec
from .classifier import TrainConfig
from .evaluation import SplitSpec
from .exceptions import ConfigurationError, InvalidInputError
from .patching import GridConfig
from .synth import SynthSpec


@dataclass(frozen=True)
class PreprocessConfig:
    low_pct: float = 0.01
    high_pct: float = 0.99

    def __post_init__(self):
        if not 0 <= self.low_pct < self.high_pct <= 1:
            raise ConfigurationError("need 0 <= low_pct < high_pct <= 1")


@dataclass(frozen=True)
class ModelConfig:
    input_side: int = 32
    hidden_units: int = 64

    def __post_init__(self):
        if self.input_side < 1 or self.hidden_units < 1:
            raise ConfigurationError("input_side and hidden_units must be >= 1")


@dataclass(frozen=True)
class FusionConfig:
    sigma: float = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be > 0")
        if not 0 <= self.threshold <= 1:
            raise ConfigurationError("threshold must lie in [0, 1]")


# section name -> (type, fields owned elsewhere and not settable in the section)
SECTIONS = {
    "preprocess": (PreprocessConfig, ()),
    "grid": (GridConfig, ()),
    "augment": (AugmentSpec, ("seed", "patch_size")),
    "model": (ModelConfig, ()),
    "train": (TrainConfig, ("seed",)),
    "fusion": (FusionConfig, ()),
    "split": (SplitSpec, ("seed",)),
    "synth": (SynthSpec, ("seed", "appearance")),
}


def _section_fields(name):
    cls, hidden = SECTIONS[name]
    return [f for f in dataclasses.fields(cls) if f.name not in hidden]


def _coerce(value, default):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise TypeError("expected a list")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError("expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise TypeError("expected an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("expected a number")
        return float(value)
    return value


@dataclass
class PipelineConfig:
    seed: int = 0
    backend: str = "reference"
    sections: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, (cls, _) in SECTIONS.items():
            self.sections.setdefault(name, {})
        self.validate()

    def _build(self, name, **extra):
        cls, hidden = SECTIONS[name]
        kwargs = dict(self.sections[name])
        if "seed" in hidden:
            kwargs["seed"] = self.seed
        kwargs.update(extra)
        try:
            return cls(**kwargs)
        except (ConfigurationError, InvalidInputError) as exc:
            raise ConfigurationError(f"{name}: {exc}") from None

    def validate(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError("seed: must be a non-negative integer")
        if self.backend != "reference" and not self.backend.startswith("cmd:"):
            raise ConfigurationError("backend: must be 'reference' or 'cmd:<command line>'")
        for name in SECTIONS:
            self.get(name)

    def get(self, name):
        if name == "augment":
            return self._build("augment", patch_size=self.get("grid").patch_size)
        return self._build(name)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = set(doc) - {"seed", "backend"} - set(SECTIONS)
        if unknown:
            raise ConfigurationError(f"{sorted(unknown)[0]}: unknown config key")
        sections = {}
        for name in SECTIONS:
            raw = doc.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigurationError(f"{name}: must be an object")
            fields = {f.name: f for f in _section_fields(name)}
            out = {}
            for key, value in raw.items():
                if key not in fields:
                    raise ConfigurationError(f"{name}.{key}: unknown config key")
                f = fields[key]
                default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
                try:
                    out[key] = _coerce(value, default)
                except TypeError as exc:
                    raise ConfigurationError(f"{name}.{key}: {exc}") from None
            sections[name] = out
        seed = doc.get("seed", 0)
        backend = doc.get("backend", "reference")
        if not isinstance(backend, str):
            raise ConfigurationError("backend: must be a string")
        return cls(seed=seed, backend=backend, sections=sections)

    @classmethod
    def load(cls, path):
        """Read a config file; a ``run.json`` written by any command is accepted too."""
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc.msg})") from None
        if isinstance(doc, dict) and "command" in doc and "config" in doc:
            doc = doc["config"]
        return cls.from_dict(doc)

    def update(self, section, **values):
        """Override values (flags take precedence over the file)."""
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            merged = dict(self.sections[section])
            merged.update(values)
            self.sections[section] = merged
            self.validate()

    def to_dict(self):
        """Fully resolved config, every field explicit."""
        doc = {"seed": self.seed, "backend": self.backend}
        for name in SECTIONS:
            obj = self.get(name)
            doc[name] = {f.name: _jsonable(getattr(obj, f.name)) for f in _section_fields(name)}
        return doc


def _jsonable(value):
    return list(value) if isinstance(value, tuple) else value

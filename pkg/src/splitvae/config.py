"""Declarative experiment configuration (YAML).

Unknown keys, wrong types and out-of-range values raise :class:`ConfigError`
carrying the offending line number of the source document.
"""

import dataclasses
from dataclasses import asdict, dataclass, field

import yaml

from .training import TrainConfig
from .vse import VseConfig

SCHEMA_VERSION = 1
GAUSSIAN_SCALES = (0.0, 1.0, 1.5, 2.0, 4.0)
POISSON_FACTORS = (0.0, 1000.0)


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class DataConfig:
    kinds: list = field(default_factory=lambda: ["dots", "curves"])
    n_images: int = 40
    size: int = 128
    densities: list = field(default_factory=lambda: [0.05, 0.08])
    peak: float = 20000.0
    seed: int = 0
    split_seed: int = 0

    def __post_init__(self):
        if len(self.kinds) != 2 or len(self.densities) != 2:
            raise ValueError("kinds and densities need exactly two entries")
        if self.n_images < 10:
            raise ValueError("n_images must be >= 10 for an 80/10/10 split")
        if self.size < 32:
            raise ValueError("size must be >= 32")


@dataclass
class NoiseConfig:
    gaussian_scale: float = 1.0
    poisson_factor: float = 1000.0
    seed: int = 1

    def __post_init__(self):
        if float(self.gaussian_scale) not in GAUSSIAN_SCALES:
            raise ValueError(f"gaussian_scale must be one of {GAUSSIAN_SCALES}, got {self.gaussian_scale}")
        if float(self.poisson_factor) not in POISSON_FACTORS:
            raise ValueError(f"poisson_factor must be one of {POISSON_FACTORS}, got {self.poisson_factor}")


@dataclass
class NoiseModelConfig:
    n_components: int = 3
    degree: int = 2
    iterations: int = 1000
    batch_pixels: int = 20000
    seed: int = 0


@dataclass
class EvalConfig:
    k: int = 50
    tile: int = 128
    pad: int = 24
    bins: int = 30
    binning: str = "equal_count"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 <= self.pad < self.tile / 2:
            raise ValueError("pad must satisfy 0 <= pad < tile/2")
        if self.binning not in ("equal_count", "equal_width"):
            raise ValueError(f"unknown binning {self.binning!r}")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    noise_model: NoiseModelConfig = field(default_factory=NoiseModelConfig)
    model: VseConfig = field(default_factory=VseConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_SECTIONS = {
    "data": DataConfig,
    "noise": NoiseConfig,
    "noise_model": NoiseModelConfig,
    "model": VseConfig,
    "training": TrainConfig,
    "evaluation": EvalConfig,
}


def _line_index(node, prefix=(), out=None):
    """Map key paths to 1-based line numbers in a composed YAML node tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (key_node.value,)
            out[path] = key_node.start_mark.line + 1
            _line_index(value_node, path, out)
    return out


def _check_type(value, default, where, line):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__}", line)
    return value


def _build(cls, doc, section, lines):
    if not isinstance(doc, dict):
        raise ConfigError(f"section '{section}' must be a mapping", lines.get((section,)))
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        line = lines.get((section, key))
        if key not in names:
            raise ConfigError(f"unknown key '{section}.{key}'", line)
        kwargs[key] = _check_type(value, getattr(defaults, key), f"{section}.{key}", line)
    base = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(cls)}
    base.update(kwargs)
    try:
        return cls(**base)
    except ValueError as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}", lines.get((section,))) from None


def from_dict(doc, lines=None):
    lines = lines or {}
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping at the top level", 1)
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}", lines.get(("schema_version",)))
    sections = {}
    for key, value in doc.items():
        if key == "schema_version":
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section '{key}'", lines.get((key,)))
        sections[key] = _build(_SECTIONS[key], value or {}, key, lines)
    if "model" not in sections:
        sections["model"] = ExperimentConfig().model
    return ExperimentConfig(**sections)


def loads(text):
    try:
        node = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(f"YAML syntax error: {exc.problem}", mark.line + 1 if mark else None) from None
    return from_dict(doc, _line_index(node) if node is not None else {})


def load(path):
    with open(path) as fh:
        return loads(fh.read())


def save(config, path):
    with open(path, "w") as fh:
        fh.write(config.to_yaml())

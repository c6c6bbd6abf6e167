"""Run configuration: a sectioned INI file mapped onto the module configs.

Every key has a default, so an empty file is a valid configuration. Unknown
sections or keys are rejected to catch typos.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import CompCseError, ConfigError
from .simgen import SystemConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class PipelineConfig:
    window_s: int = 1
    clean_threshold: float = 0.85
    n_train: int = 30000
    n_val: int = 5000
    n_test: int = 4000

    def __post_init__(self):
        if self.window_s < 0:
            raise ConfigError("window_s must be >= 0")
        if not 0 < self.clean_threshold:
            raise ConfigError("clean_threshold must be > 0")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def sizes(self):
        return self.n_train, self.n_val, self.n_test


@dataclass(frozen=True)
class CasesConfig:
    count: int = 5
    num_seconds: int = 3000

    def __post_init__(self):
        if not 0 <= self.count <= len(CASE_VARIANTS):
            raise ConfigError(f"count must be in [0, {len(CASE_VARIANTS)}]")
        if self.num_seconds < 2:
            raise ConfigError("num_seconds must be >= 2")


# held-out generator settings emulating different places and times
CASE_VARIANTS = (
    {"min_distance_m": 150.0, "max_distance_m": 300.0, "corruption_fraction": 0.05},
    {"min_distance_m": 40.0, "max_distance_m": 120.0},
    {"pathloss_exponent": 3.05, "corruption_fraction": 0.15},
    {"shadowing_sigma_db": 6.0},
    {"pathloss_exponent": 2.95, "max_distance_m": 200.0, "corruption_fraction": 0.05},
)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    out_dir: str = "comp_cse_out"
    num_seconds: int = 90000
    baseline: bool = True
    simgen: SystemConfig = field(default_factory=SystemConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cases: CasesConfig = field(default_factory=CasesConfig)

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.num_seconds < 2:
            raise ConfigError("num_seconds must be >= 2")
        # one seed drives every stage
        if self.simgen.seed != self.seed:
            object.__setattr__(self, "simgen", dataclasses.replace(self.simgen, seed=self.seed))
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=seed)

    def case_system(self, k):
        """SystemConfig of held-out case ``k`` (0-based)."""
        seed = (self.seed + 1000 * (k + 1)) % 2**64
        return dataclasses.replace(self.simgen, seed=seed, **CASE_VARIANTS[k])


# section -> (dataclass, keys excluded from the file)
_SECTIONS = {
    "simgen": (SystemConfig, {"seed"}),
    "pipeline": (PipelineConfig, set()),
    "train": (TrainConfig, {"seed", "model_kind"}),
    "cases": (CasesConfig, set()),
}
_RUN_KEYS = ("seed", "out_dir", "num_seconds", "baseline")


def _convert(section, key, raw, default):
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: invalid value {raw!r} ({exc})") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    unknown = set(parser.sections()) - set(_SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")

    defaults = RunConfig()
    run_kwargs = {}
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key not in _RUN_KEYS:
                raise ConfigError(f"[run] {key}: unknown key")
            run_kwargs[key] = _convert("run", key, raw, getattr(defaults, key))

    for section, (cls, excluded) in _SECTIONS.items():
        base = getattr(defaults, section)
        kwargs = {}
        if parser.has_section(section):
            names = {f.name for f in dataclasses.fields(cls)} - excluded
            for key, raw in parser.items(section):
                if key not in names:
                    raise ConfigError(f"[{section}] {key}: unknown key")
                kwargs[key] = _convert(section, key, raw, getattr(base, key))
        try:
            run_kwargs[section] = dataclasses.replace(base, **kwargs)
        except ConfigError:
            raise
        except CompCseError as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    return RunConfig(**run_kwargs)


def load_config(path) -> RunConfig:
    """Read and validate a config file; raises ``FileNotFoundError`` if absent."""
    with open(path) as fh:
        return parse_config(fh.read())


def _sections(cfg: RunConfig, include_paths=True):
    run = {k: getattr(cfg, k) for k in _RUN_KEYS if include_paths or k != "out_dir"}
    out = {"run": run}
    for section, (cls, excluded) in _SECTIONS.items():
        obj = getattr(cfg, section)
        out[section] = {f.name: getattr(obj, f.name) for f in dataclasses.fields(cls) if f.name not in excluded}
    return out


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in _sections(cfg).items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {repr(value) if isinstance(value, float) else value}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    """Digest of every setting that affects results (output paths excluded)."""
    blob = json.dumps(_sections(cfg, include_paths=False), sort_keys=True, default=repr)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]

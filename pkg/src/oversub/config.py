"""Experiment configuration: defaults, YAML file loading, CLI overrides,
and the canonical hash that ties checkpoints to the settings that made them.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigError

DOMAINS = ("cloud", "airline")
FEEDBACK_SOURCES = ("interactive", "oracle", "none")
DEFAULT_K = {"cloud": 3, "airline": 4}
OUTPUT_ROOT_ENV = "OVERSUB_OUTPUT_ROOT"


@dataclass
class HITLConfig:
    enabled: bool = True
    feedback_source: str = "oracle"    # interactive | oracle | none
    frequency: int = 10                # query cadence in iterations
    warmup: int = 100                  # no queries before this iteration
    u_p: float = 0.55                  # prototype uncertainty threshold
    u_a: float = 0.55                  # action uncertainty threshold
    n_top: int = 5                     # top-N mean-distance filter
    shadow_iterations: int = 30        # extra iterations after merge/split
    max_action_queries: int = 24
    suggestion_percentile: float = 10.0
    oracle_rules: dict = field(default_factory=dict)


@dataclass
class SimConfig:
    # cloud
    services: int = 30
    nodes: int = 8
    core_capacity: int = 48
    mem_capacity: float = 512.0
    hours: int = 336
    hot_threshold: float = 0.85
    # airline
    airlines: int = 32
    years: int = 24
    max_margin: float = 0.10
    compensation_unit: float = 800.0
    fare_unit: float = 200.0


@dataclass
class ExperimentConfig:
    domain: str = "cloud"
    seed: int = 0
    k: int = 0                          # 0 -> domain default (3 cloud, 4 airline)
    learning_rate: float = 1e-2
    hidden: int = 64
    batch_size: int = 128
    epochs: int = 300
    bptt_window: int = 24              # hours per truncated-backprop window (0 = full)
    w1: float = 0.8
    w2: float = 0.1
    w3: float = 0.1
    w4: float = 1.0
    train_fraction: float = 0.8
    bc_loss_kind: str = "cross_entropy"   # cross_entropy | squared_error
    hitl: HITLConfig = field(default_factory=HITLConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    output_dir: str = ""

    def __post_init__(self):
        if isinstance(self.hitl, dict):
            self.hitl = HITLConfig(**self.hitl)
        if isinstance(self.sim, dict):
            self.sim = SimConfig(**self.sim)
        self.validate()

    def validate(self) -> None:
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.hitl.feedback_source not in FEEDBACK_SOURCES:
            raise ConfigError(f"feedback_source must be one of {FEEDBACK_SOURCES}")
        if self.k < 0:
            raise ConfigError("k must be >= 0 (0 selects the domain default)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.bptt_window < 0:
            raise ConfigError("bptt_window must be >= 0 (0 disables truncation)")
        for name in ("w1", "w2", "w3", "w4"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.bc_loss_kind not in ("cross_entropy", "squared_error"):
            raise ConfigError("bc_loss_kind must be cross_entropy or squared_error")
        if self.hitl.frequency < 1:
            raise ConfigError("hitl.frequency must be >= 1")

    @property
    def resolved_k(self) -> int:
        return self.k if self.k > 0 else DEFAULT_K[self.domain]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from an optional YAML file plus flat override values.

    Overrides use dotted keys for nested sections (``hitl.frequency``) and
    win over the file.
    """
    data: dict = {}
    if path:
        try:
            with open(path) as f:
                loaded = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed config file {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a mapping")
        data = loaded
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key} conflicts with a scalar in the file")
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(data)


def output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


def resolve_output_dir(config: ExperimentConfig, kind: str = "train") -> str:
    if config.output_dir:
        return config.output_dir
    return os.path.join(output_root(), f"{config.domain}-{kind}-seed{config.seed}-{config.hash()}")

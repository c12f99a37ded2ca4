"""Pipeline configuration: one flat TOML file, validated on load.

Schema (all keys optional, defaults shown)::

    scales = [0.8, 0.4, 0.2]     # cell sizes in meters, coarse -> fine
    query_count = 850
    feature_dim = 64
    llm_dim = 128
    encoder_depth = 2
    heads = 4
    ffn_ratio = 4
    num_classes = 20
    seed = 42
    regularization = 1e-6        # added as eps*I to covariances fed downstream
    use_depth_test = true
    depth_tolerance = 0.02       # meters

    [loss_weights]
    lambda1 = 1.0
    lambda2 = 1.0
    lambda3 = 1.0
    lambda4 = 1.0
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be nonnegative")


@dataclass(frozen=True)
class PipelineConfig:
    scales: tuple[float, ...] = (0.8, 0.4, 0.2)
    query_count: int = 850
    feature_dim: int = 64
    llm_dim: int = 128
    encoder_depth: int = 2
    heads: int = 4
    ffn_ratio: int = 4
    num_classes: int = 20
    seed: int = 42
    regularization: float = 1e-6
    use_depth_test: bool = True
    depth_tolerance: float = 0.02
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        self.validate()

    def validate(self) -> None:
        if not self.scales:
            raise ConfigError("scales must list at least one cell size")
        if any(s <= 0 for s in self.scales):
            raise ConfigError("cell sizes must be positive")
        if any(b >= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"scales must be strictly decreasing, got {list(self.scales)}")
        if self.query_count < 1:
            raise ConfigError("query_count must be at least 1")
        if self.feature_dim < 6:
            raise ConfigError("feature_dim must be at least 6")
        if self.heads < 1 or self.feature_dim % self.heads:
            raise ConfigError(
                f"heads ({self.heads}) must divide feature_dim ({self.feature_dim})")
        if self.llm_dim < 1 or self.encoder_depth < 0 or self.ffn_ratio < 1:
            raise ConfigError("llm_dim, encoder_depth and ffn_ratio must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1")
        if self.regularization < 0 or self.depth_tolerance < 0:
            raise ConfigError("regularization and depth_tolerance must be nonnegative")

    @property
    def scale_count(self) -> int:
        return len(self.scales)

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_ratio * self.feature_dim

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


def config_from_dict(doc: dict) -> PipelineConfig:
    doc = dict(doc)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    weights = doc.pop("loss_weights", {})
    try:
        return PipelineConfig(loss_weights=LossWeights(**weights), **doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        doc = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)

"""Single-file run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, FormatError
from .pipeline import NodeGraph
from .priors import DenoiserPrior
from .rangeview import ProjectionConfig
from .sampling import RowSelection, uniform_selection
from .segment import SegmenterConfig
from .solver import SolverConfig


@dataclass
class ProjectionSection:
    width: int = 1024
    fov_up: float = 15.0
    fov_down: float = -15.0
    low_height: int = 16
    high_height: int = 64


@dataclass
class SamplingSection:
    offset: int = 0


@dataclass
class SolverSection:
    b: float = 0.5
    iterations: int = 5
    prior: str = "tv-prox"
    prior_strength: float = 6.0
    tv_inner_iters: int = 5
    median_window: int = 3
    init: str = "replicate-rows"


@dataclass
class SegmenterSection:
    ground_angle_max: float = 10.0
    cluster_angle_min: float = 10.0
    min_cluster_size: int = 8


@dataclass
class GraphSection:
    queue_capacity: int = 2
    drop_policy: str = "block"


@dataclass
class RunConfig:
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    solver: SolverSection = field(default_factory=SolverSection)
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)
    graph: GraphSection = field(default_factory=GraphSection)

    @classmethod
    def from_dict(cls, data: dict | None) -> RunConfig:
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("configuration root must be a mapping")
        cfg = cls()
        sections = {f.name for f in dataclasses.fields(cls)}
        for name, values in data.items():
            if name not in sections:
                raise ConfigError(f"unknown configuration section {name!r}")
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            cfg.update(name, values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise FormatError(f"cannot read config {path}: {e}") from e
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise FormatError(f"config {path} is not valid YAML: {e}") from e
        return cls.from_dict(data)

    def update(self, section: str, values: dict) -> None:
        sec = getattr(self, section)
        known = {f.name: f for f in dataclasses.fields(sec)}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            if value is None:
                continue
            setattr(sec, key, _coerce(value, known[key].type, f"{section}.{key}"))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        """Build every derived config once so range errors surface early."""
        self.low_cfg(), self.high_cfg(), self.selection()
        self.solver_config(), self.segmenter_config(), self.graph_config()

    def low_cfg(self) -> ProjectionConfig:
        p = self.projection
        return ProjectionConfig(p.low_height, p.width, p.fov_up, p.fov_down)

    def high_cfg(self) -> ProjectionConfig:
        p = self.projection
        return ProjectionConfig(p.high_height, p.width, p.fov_up, p.fov_down)

    def selection(self) -> RowSelection:
        return uniform_selection(self.projection.high_height, self.projection.low_height, self.sampling.offset)

    def solver_config(self) -> SolverConfig:
        s = self.solver
        prior = DenoiserPrior(s.prior, s.prior_strength, s.median_window, s.tv_inner_iters)
        return SolverConfig(s.b, s.iterations, prior, s.prior_strength, s.init)

    def segmenter_config(self) -> SegmenterConfig:
        s = self.segmenter
        return SegmenterConfig(s.ground_angle_max, s.cluster_angle_min, s.min_cluster_size)

    def graph_config(self, sinks=None) -> NodeGraph:
        return NodeGraph(list(sinks or []), self.graph.queue_capacity, self.graph.drop_policy)


def _coerce(value, typ, key):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "str": str}[typ]
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value

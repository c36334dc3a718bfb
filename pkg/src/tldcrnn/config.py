"""Run configuration: nested JSON sections with strict keys."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from .timeseries import ConfigError


@dataclass
class DataSection:
    frame: str | None = None
    format: str = "csv"
    distances: str | None = None
    graph: str | None = None
    assignment: str | None = None
    checkpoint: str | None = None

    def validate(self):
        if self.format not in ("csv", "binary"):
            raise ConfigError(f"data.format must be csv or binary, got {self.format!r}")


@dataclass
class GraphSection:
    sigma: float | None = None
    tau: float = 0.1

    def validate(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError("graph.sigma must be positive")
        if not 0 <= self.tau < 1:
            raise ConfigError("graph.tau must lie in [0, 1)")


@dataclass
class PartitionSection:
    k: int = 4
    tol: float = 0.10
    seed: int = 0
    overlap_hops: int = 0
    n: int | None = None  # padded size; defaults to the largest part

    def validate(self):
        if self.k < 1:
            raise ConfigError("partition.k must be positive")
        if self.tol < 0:
            raise ConfigError("partition.tol must be non-negative")
        if self.overlap_hops < 0:
            raise ConfigError("partition.overlap_hops must be non-negative")
        if self.n is not None and self.n < 1:
            raise ConfigError("partition.n must be positive")


@dataclass
class ModelSection:
    P: int = 12
    Q: int = 12
    K: int = 2
    L: int = 2
    R: int = 16

    def validate(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"model.{f.name} must be positive")


@dataclass
class TrainSection:
    batch: int = 64
    epochs: int = 30
    lr: float = 0.01
    decay: float = 0.1
    decay_epochs: list = field(default_factory=lambda: [20])
    clip: float = 5.0
    seed: int = 0
    parts: list | None = None  # source parts; None = all
    split: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    scheduled_sampling: bool = False
    sampling_decay_steps: float = 2000.0
    shuffle_subgraphs: int | None = None  # seed; None keeps ascending part order

    def validate(self):
        if not self.sampling_decay_steps > 0:
            raise ConfigError("train.sampling_decay_steps must be positive")
        if self.batch < 1 or self.epochs < 1:
            raise ConfigError("train.batch and train.epochs must be positive")
        if not self.lr > 0 or not self.clip > 0:
            raise ConfigError("train.lr and train.clip must be positive")
        if not 0 < self.decay <= 1:
            raise ConfigError("train.decay must lie in (0, 1]")
        if len(self.split) != 3 or any(x <= 0 for x in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError("train.split must be three positive fractions summing to 1")


@dataclass
class EvalSection:
    bins: list = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 1.0])
    alpha: float = 0.05
    mape_floor: float = 1.0

    def validate(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("eval.alpha must lie in (0, 1)")
        if len(self.bins) < 2 or any(b <= a for a, b in zip(self.bins, self.bins[1:])):
            raise ConfigError("eval.bins must be strictly increasing with at least two edges")


@dataclass
class SynthSection:
    regions: int = 6
    nodes_per_region: int = 48
    days: int = 28
    seed: int = 0
    missing: float = 0.0

    def validate(self):
        if self.regions < 1 or self.nodes_per_region < 4 or self.days < 1:
            raise ConfigError("synth needs regions >= 1, nodes_per_region >= 4, days >= 1")
        if not 0 <= self.missing < 1:
            raise ConfigError("synth.missing must lie in [0, 1)")


SECTIONS = {
    "data": DataSection,
    "graph": GraphSection,
    "partition": PartitionSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
    "synth": SynthSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    graph: GraphSection = field(default_factory=GraphSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSection = field(default_factory=SynthSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, sec_cls in SECTIONS.items():
            body = doc.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in fields(sec_cls)}
            bad = set(body) - known
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            try:
                parts[name] = sec_cls(**body)
            except TypeError as exc:
                raise ConfigError(f"bad {name} section: {exc}") from None
        cfg = cls(**parts)
        try:
            cfg.validate()
        except TypeError as exc:
            raise ConfigError(f"config value has the wrong type: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def validate(self) -> None:
        for name in SECTIONS:
            getattr(self, name).validate()

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides; returns a new validated config."""
        doc = copy.deepcopy(self.to_dict())
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in doc or key not in doc[section]:
                raise ConfigError(f"unknown config key {dotted!r}")
            doc[section][key] = value
        return RunConfig.from_dict(doc)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def leaf_keys() -> list[tuple[str, str, type]]:
    """(section, key, annotation) for every config leaf."""
    out = []
    for name, sec_cls in SECTIONS.items():
        for f in fields(sec_cls):
            out.append((name, f.name, f.type))
    return out

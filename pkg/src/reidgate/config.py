"""Experiment configuration: nested dataclasses with JSON round-trip."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


@dataclass
class ModelConfig:
    d_emb: int = 32
    h: int = 32
    r: int = 16
    tau: float = 0.3
    gate_mode: str = "soft"  # soft | hard | forced_open | forced_closed
    literal_cell: bool = False  # sigmoid candidate activation instead of tanh
    gate_project_dim: int = None  # project F before the gate; None uses raw F


@dataclass
class LossConfig:
    alpha: float = 0.3
    use_triplet: bool = True
    l2_normalize: bool = False  # normalize fused embeddings before distances


@dataclass
class OptimConfig:
    algorithm: str = "adam"  # adam | sgd
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 60


@dataclass
class SamplerConfig:
    p: int = 8  # identities per batch
    k: int = 4  # observations per identity


@dataclass
class SyntheticDataConfig:
    num_identities: int = 50
    obs_per_id: int = 8
    num_attributes: int = 16
    dim_f: int = 64
    sigma_vis: float = 0.3
    p_token_err: float = 0.15
    p_distractor: float = 0.3
    num_cameras: int = 4
    seed: int = 0


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | files
    synthetic: SyntheticDataConfig = field(default_factory=SyntheticDataConfig)
    features_path: str = None
    captions_path: str = None


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def validate(self):
        m = self.model
        for name in ("d_emb", "h", "r"):
            if getattr(m, name) <= 0:
                raise ValueError(f"config: model.{name} must be positive")
        if m.tau <= 0:
            raise ValueError("config: model.tau must be positive")
        if self.loss.use_triplet and (self.sampler.p < 2 or self.sampler.k < 2):
            raise ValueError("config: triplet loss requires sampler.p >= 2 and sampler.k >= 2")
        if self.data.source not in ("synthetic", "files"):
            raise ValueError(f"config: unknown data source {self.data.source!r}")
        if self.data.source == "files" and not (self.data.features_path and self.data.captions_path):
            raise ValueError("config: file data source requires features_path and captions_path")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _build(cls, values, context):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, val in values.items():
        if key not in fields:
            raise ValueError(f"config: unknown key {context}{key}")
        ftype = fields[key].type
        nested = {
            "ModelConfig": ModelConfig, "LossConfig": LossConfig, "OptimConfig": OptimConfig,
            "SamplerConfig": SamplerConfig, "SyntheticDataConfig": SyntheticDataConfig,
            "DataConfig": DataConfig,
        }.get(ftype if isinstance(ftype, str) else getattr(ftype, "__name__", ""))
        if nested is not None and isinstance(val, dict):
            kwargs[key] = _build(nested, val, f"{context}{key}.")
        else:
            kwargs[key] = val
    return cls(**kwargs)


def config_from_dict(values) -> ExperimentConfig:
    return _build(ExperimentConfig, values or {}, "").validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Dotted-path overrides, e.g. {"optim.lr": 0.01, "seed": 3}."""
    data = cfg.to_dict()
    for path, value in overrides.items():
        node = data
        parts = path.split(".")
        for part in parts[:-1]:
            if part not in node:
                raise ValueError(f"config: unknown override path {path!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"config: unknown override path {path!r}")
        node[parts[-1]] = value
    return config_from_dict(data)

from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


class GraphOperatorKind(str, Enum):
    GCN = "gcn"
    GC = "gc"
    RGGC = "rggc"
    TAG = "tag"


class ModelConfig(BaseModel):
    """Architecture hyperparameters"""
    model_config = ConfigDict(extra="forbid")

    hidden_dim: int = Field(64, ge=2, description="Token width H")
    window: int = Field(6, description="Residues merged per fragment token (w)")
    operator: GraphOperatorKind = Field(GraphOperatorKind.RGGC, description="Graph operator of the merging layer")
    tag_hops: int = Field(2, description="Hop count K of the TAG operator")
    cutoff: float = Field(10.0, gt=0, description="Radius-graph cutoff c in Angstrom")
    n_heads: int = Field(4, ge=1)
    n_layers: int = Field(3, ge=0, description="Transformer blocks in the token mixer")
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    attention: Literal["blockwise", "naive"] = "blockwise"
    block_size: int = Field(64, ge=1)
    positional_encoding: bool = True
    encoder: Literal["tmm", "gnn", "mean"] = Field("tmm", description="tmm: full pipeline, gnn: stacked RGGC baseline, mean: token average")
    gnn_layers: int = Field(4, ge=1)
    output_dim: int = Field(4, ge=1, description="VAMP output dimension k")
    feature_seed: int = Field(0, ge=0, description="Seed of the featurizer projection")

    @field_validator("window")
    def window_positive(cls, v):
        """Merging needs at least one residue per window"""
        if v < 1:
            raise ValueError("window size w must be >= 1")
        return v

    @field_validator("tag_hops")
    def tag_hops_positive(cls, v):
        if v < 1:
            raise ValueError("TAG hop count K must be >= 1")
        return v

    @model_validator(mode="after")
    def heads_divide_hidden(self):
        """Positional encoding needs an even width and the heads must tile it"""
        if self.hidden_dim % 2:
            raise ValueError(f"hidden_dim must be even, got {self.hidden_dim}")
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide hidden_dim={self.hidden_dim}")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads


class TrainConfig(BaseModel):
    """Optimisation and data-sampling hyperparameters"""
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(1000, ge=1)
    learning_rate: Optional[float] = Field(None, ge=0, description="Defaults to 5e-4 for VAMP and 2e-4 for SPIB")
    max_epochs: int = Field(5, ge=1)
    validation_interval: int = Field(50, ge=1, description="Training steps between validation steps")
    validation_patience: int = Field(10, ge=1, description="Validation steps without improvement before stopping")
    training_patience: int = Field(1000, ge=1, description="Training steps without improvement before stopping")
    lag_ns: float = Field(1.0, gt=0)
    stride: int = Field(1, ge=1)
    vamp_eps: float = Field(1e-6, gt=0)
    seed: int = Field(0, ge=0)

    def resolved_learning_rate(self, objective: str) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 2e-4 if objective == "spib" else 5e-4


class SplitSpec(BaseModel):
    """Train/validation split by whole trajectories or by temporal fragments"""
    model_config = ConfigDict(extra="forbid")

    validation_fraction: float = Field(0.2, gt=0, lt=1)
    split_mode: Literal["by-trajectory", "by-temporal-fragment"] = "by-trajectory"
    n_fragments: int = Field(2, ge=2)
    seed: int = Field(0, ge=0)


class SpibConfig(BaseModel):
    """State predictive information bottleneck settings"""
    model_config = ConfigDict(extra="forbid")

    latent_dim: int = Field(2, ge=1)
    n_pseudo_inputs: int = Field(10, ge=1)
    beta: float = Field(0.01, ge=0)
    n_init_states: int = Field(100, ge=1, description="k of the k-means label initialisation")
    refine_interval: int = Field(5, ge=1, description="Epochs between label refinements")
    max_refinements: int = Field(5, ge=1)
    refine_patience: int = Field(10, ge=1, description="Validation steps without improvement that force a refinement")
    refine_tolerance: float = Field(0.01, ge=0, description="Label-change fraction counted as converged")


# flat key -> (section, field)
_SECTIONS: Dict[str, type] = {"network": ModelConfig, "training": TrainConfig, "split": SplitSpec, "spib": SpibConfig}
_RENAMES = {("split", "seed"): "split_seed"}


def _flat_keys() -> Dict[str, Tuple[str, str]]:
    keys: Dict[str, Tuple[str, str]] = {}
    for section, model in _SECTIONS.items():
        for name in model.model_fields:
            keys[_RENAMES.get((section, name), name)] = (section, name)
    return keys


FLAT_KEYS = _flat_keys()


class RunConfig(BaseModel):
    """
    Every tunable of a run. Serialised as plain ``key=value`` lines
    """
    model_config = ConfigDict(extra="forbid")

    network: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)
    spib: SpibConfig = Field(default_factory=SpibConfig)

    @classmethod
    def from_pairs(cls, pairs: Dict[str, str]) -> "RunConfig":
        sections: Dict[str, Dict[str, str]] = {name: {} for name in _SECTIONS}
        for key, value in pairs.items():
            if key not in FLAT_KEYS:
                raise ConfigError(f"unknown configuration key '{key}'")
            section, field = FLAT_KEYS[key]
            sections[section][field] = value
        try:
            return cls(**{name: _SECTIONS[name](**values) for name, values in sections.items()})
        except ValidationError as err:
            problems = "; ".join(f"{'.'.join(str(p) for p in e['loc']) or 'config'}: {e['msg']}" for e in err.errors())
            raise ConfigError(f"invalid configuration: {problems}") from None

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        pairs: Dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got '{raw.strip()}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in pairs:
                raise ConfigError(f"line {lineno}: duplicate key '{key}'")
            pairs[key] = value
        return cls.from_pairs(pairs)

    def with_overrides(self, **pairs: str) -> "RunConfig":
        merged = {k: str(v) for k, v in self.flat().items()}
        merged.update({k: str(v) for k, v in pairs.items()})
        return RunConfig.from_pairs(merged)

    def flat(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        for section in _SECTIONS:
            for name, value in getattr(self, section).model_dump(mode="json").items():
                out[_RENAMES.get((section, name), name)] = value
        return out

    def dump(self) -> str:
        lines = []
        for key, value in self.flat().items():
            if value is None:
                continue
            lines.append(f"{key}={str(value).lower() if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"


class TrajectoryEntry(BaseModel):
    """One trajectory in a dataset manifest; paths are relative to the manifest"""
    name: str
    n_frames: int = Field(..., ge=0)
    positions: Optional[str] = None
    tokens: Optional[str] = None
    coordinates: Optional[str] = Field(None, description="CSV of the generating collective coordinate")


class DatasetManifest(BaseModel):
    """JSON manifest listing the files of one dataset"""
    system: str
    frame_interval: float = Field(..., gt=0, description="Time units (ns) between stored frames")
    seed: int = 0
    hidden_dim: Optional[int] = None
    trajectories: List[TrajectoryEntry] = Field(default_factory=list)


class ScoreRecord(BaseModel):
    step: int
    train_score: float
    val_score: Optional[float] = None


class ProfileRow(BaseModel):
    """One profiled (system size, window, operator) configuration"""
    n_residues: int
    window: int
    operator: GraphOperatorKind
    ms_per_step: float
    peak_bytes: int
    pair_count: int
    batch: int = 1

    @field_validator("pair_count")
    def pair_count_non_negative(cls, v):
        if v < 0:
            raise ValueError("pair count cannot be negative")
        return v

    @property
    def pair_evaluations(self) -> int:
        """Attention scores computed per head and layer across the batch"""
        return self.batch * self.pair_count

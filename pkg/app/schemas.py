"""Pydantic schemas for run configuration and emitted documents.

Configuration models forbid unknown keys so that a typo in a config file
fails loudly instead of silently falling back to a default. Report
models double as the JSON schemas documented in docs/formats.md.
"""

from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.utils.hashing import config_digest


# ---- Enums for strong typing ----

class AttentionPolicy(str, Enum):
    blocked = "blocked"  # queries see references and themselves only
    full = "full"


class Precision(str, Enum):
    f32 = "f32"
    f64 = "f64"


class BackgroundPolicy(str, Enum):
    black = "black"
    solid = "solid"
    noise = "noise"
    mixed = "mixed"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=True, validate_default=True)


# ---- Run configuration ----

class DataConfig(_Strict):
    n_objects: int = Field(default=180, ge=1)
    holdout_objects: int = Field(default=30, ge=0)
    crop: int = Field(default=32, ge=8, le=256)
    n_ref_pool: int = Field(default=64, ge=1)
    n_query_pool: int = Field(default=16, ge=1)
    seed: int = 0
    background: BackgroundPolicy = BackgroundPolicy.mixed

    @model_validator(mode="after")
    def _holdout_leaves_training_objects(self):
        if self.holdout_objects >= self.n_objects:
            raise ValueError("holdout_objects must be smaller than n_objects")
        return self


class ModelConfig(_Strict):
    d: int = Field(default=128, ge=1)
    encoder_channels: Tuple[int, ...] = (16, 32, 64)
    depth: int = Field(default=4, ge=1)
    heads: int = Field(default=4, ge=1)
    mlp_ratio: int = Field(default=4, ge=1)
    rot_hidden: int = Field(default=128, ge=1)
    head_hidden: int = Field(default=128, ge=1)
    attention: AttentionPolicy = AttentionPolicy.blocked
    crop: int = Field(default=32, ge=8, le=256)
    positional_encoding: bool = False
    max_tokens: int = Field(default=256, ge=2)
    init_seed: int = 0

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if not self.encoder_channels or any(c < 1 for c in self.encoder_channels):
            raise ValueError("encoder_channels must be a non-empty list of positive widths")
        return self


class TrainConfig(_Strict):
    objects_per_batch: int = Field(default=5, ge=1)
    n_ref: int = Field(default=16, ge=1)
    n_query: int = Field(default=8, ge=1)
    total_steps: int = Field(default=2000, ge=0)
    lr: float = Field(default=3e-4, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    seed: int = 0
    rotation_augmentation: bool = True
    background: BackgroundPolicy = BackgroundPolicy.mixed
    render_on_the_fly: bool = False
    precision: Precision = Precision.f32
    checkpoint_every: int = Field(default=500, ge=0)
    val_every: int = Field(default=250, ge=0)
    log_every: int = Field(default=50, ge=1)
    freeze_encoder_after: Optional[int] = Field(default=None, ge=0)


class EvalConfig(_Strict):
    k: List[int] = Field(default_factory=lambda: [8, 16, 32, 64])
    thresholds: List[float] = Field(default_factory=lambda: [5.0, 10.0, 15.0, 30.0])
    gaps: List[float] = Field(default_factory=lambda: [10.0, 20.0, 30.0, 40.0, 50.0])
    trials: int = Field(default=50, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _positive(self):
        if not self.k or any(k < 1 for k in self.k):
            raise ValueError("eval.k must be a non-empty list of positive counts")
        if not self.thresholds or any(t <= 0 for t in self.thresholds):
            raise ValueError("eval.thresholds must be positive degrees")
        return self


class RunConfig(_Strict):
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _sections_agree(self):
        if self.model.crop != self.data.crop:
            raise ValueError(f"model.crop={self.model.crop} differs from data.crop={self.data.crop}")
        if max(self.eval.k) > self.data.n_ref_pool:
            raise ValueError(f"eval.k max {max(self.eval.k)} exceeds data.n_ref_pool={self.data.n_ref_pool}")
        train_objects = self.data.n_objects - self.data.holdout_objects
        if self.train.objects_per_batch > train_objects:
            raise ValueError(
                f"train.objects_per_batch={self.train.objects_per_batch} exceeds "
                f"the {train_objects} training objects"
            )
        if self.train.n_ref + self.train.n_query > self.data.n_ref_pool + self.data.n_query_pool:
            raise ValueError("train.n_ref + train.n_query exceeds the per-object view pool")
        return self

    def config_hash(self) -> str:
        return config_digest(self.model_dump(mode="json"))

    def data_hash(self) -> str:
        return config_digest(self.data.model_dump(mode="json"))


# ---- Emitted documents ----

class TrainLogRecord(BaseModel):
    step: int
    loss: float
    val_acc: Optional[float] = None
    ms_per_step: float
    config_hash: Optional[str] = None


class QueryError(BaseModel):
    query_index: int
    error_deg: float = Field(ge=0.0, le=180.0)


class ObjectResult(BaseModel):
    object_id: str
    errors: List[QueryError]
    accuracy: Dict[str, float]
    mean_error: float
    median_error: float


class TimingStats(BaseModel):
    per_query_ms_mean: float = 0.0
    per_query_ms_p50: float = 0.0
    per_query_ms_p95: float = 0.0
    onboarding_ms_mean: float = 0.0


class EvalReport(BaseModel):
    method: str
    k_refs: int
    thresholds: List[float]
    objects: List[ObjectResult]
    accuracy: Dict[str, float]
    mean_error: float
    median_error: float
    timing: TimingStats = Field(default_factory=TimingStats)
    peak_memory_mb: float = 0.0
    config_hash: Optional[str] = None


class SweepResult(BaseModel):
    variable: str
    values: List[float]
    metrics: Dict[str, List[float]]

    @model_validator(mode="after")
    def _aligned(self):
        for name, series in self.metrics.items():
            if len(series) != len(self.values):
                raise ValueError(f"metric '{name}' has {len(series)} values for {len(self.values)} settings")
        return self


class BenchRow(BaseModel):
    n_refs: int
    n_queries: int
    onboarding_ms: float
    per_query_ms_mean: float
    per_query_ms_p50: float
    per_query_ms_p95: float
    single_query_ms: float
    batch_pass_ms: float
    peak_traced_mb: float
    peak_rss_mb: float
    config_hash: Optional[str] = None


def threshold_key(threshold: float) -> str:
    """Stable dictionary key for an accuracy threshold, e.g. 15.0 -> "15"."""
    return f"{threshold:g}"

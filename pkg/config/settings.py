# config/settings.py
"""
Configuration models for attnforge.

Every record is a pydantic model so that JSON config files, CLI overrides
and run manifests share one validated representation.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from attention.variants import AttentionVariant
from config.errors import ConfigError

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent / "presets"
OUT_DIR_ENV = "ATTNFORGE_OUT_DIR"
DEFAULT_OUT_DIR = "outputs"

TaskName = Literal["copy", "reversal", "mlm-synthetic", "toy-classify"]
Precision = Literal["float64", "float32"]


def _parse_variant(value: Any) -> Any:
    if isinstance(value, str):
        return AttentionVariant.parse(value)
    return value


def _parse_variant_list(value: Any) -> Any:
    if isinstance(value, str):
        return AttentionVariant.parse_list(value)
    return [_parse_variant(v) for v in value]


class ModelConfig(BaseModel):
    """Encoder hyperparameters (BERT-style, post layer-norm)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    layers: int = Field(ge=0)
    d_model: int = Field(gt=0)
    heads: int = Field(gt=0)
    vocab_size: int = Field(gt=0)
    max_seq: int = Field(ge=1)
    ffn_width: Optional[int] = Field(default=None, gt=0)
    variant: AttentionVariant
    bias: bool = False
    dropout_hidden: float = Field(default=0.1, ge=0.0, lt=1.0)
    dropout_attn: float = Field(default=0.1, ge=0.0, lt=1.0)
    head: Literal["mlm", "classify"] = "mlm"
    num_classes: int = Field(default=2, ge=2)
    tie_embeddings: bool = True
    layer_norm_eps: float = Field(default=1e-12, gt=0.0)
    init_std: float = Field(default=0.02, gt=0.0)
    diag_jitter: float = Field(default=0.02, ge=0.0)
    pad_token_id: int = Field(default=0, ge=0)
    mask_token_id: int = Field(default=1, ge=0)

    @field_validator("variant", mode="before")
    @classmethod
    def _variant_tag(cls, value: Any) -> Any:
        return _parse_variant(value)

    @model_validator(mode="after")
    def _check_shape(self) -> "ModelConfig":
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.mask_token_id >= self.vocab_size or self.pad_token_id >= self.vocab_size:
            raise ValueError("special token ids must be smaller than vocab_size")
        return self

    @property
    def ffn_dim(self) -> int:
        return self.ffn_width if self.ffn_width is not None else 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def with_overrides(self, **overrides: Any) -> "ModelConfig":
        """Return a re-validated copy with some fields replaced."""
        data = self.model_dump()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return ModelConfig(**data)


class TrainConfig(BaseModel):
    """Optimizer and data settings for toy-scale training runs."""

    model_config = ConfigDict(extra="forbid")

    steps: int = Field(default=200, ge=1)
    batch: int = Field(default=16, ge=1)
    lr: float = Field(default=1e-3, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    schedule: Literal["constant", "linear"] = "constant"
    warmup_steps: int = Field(default=0, ge=0)
    grad_clip: Optional[float] = Field(default=1.0, gt=0.0)
    seed: int = Field(default=0, ge=0)
    task: TaskName = "copy"
    seq_len: int = Field(default=16, ge=2)
    mask_ratio: float = Field(default=0.15, gt=0.0, lt=1.0)
    noise_at_train: float = Field(default=0.0, ge=0.0, le=0.40)
    noise_seed: Optional[int] = Field(default=None, ge=0)
    corpus_path: Optional[str] = None
    log_interval: int = Field(default=50, ge=1)


class NoiseSpec(BaseModel):
    """Embedding noise level as a fraction of the mean embedding L2 norm.

    As the config file's ``noise`` section it sets train-time noise
    (``level``) and the seed of the train-noise stream.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    level: float = Field(ge=0.0, le=0.40)
    seed: int = Field(default=0, ge=0)


class BenchConfig(BaseModel):
    """Timing benchmark shape. Timing uses one encoder block per variant."""

    model_config = ConfigDict(extra="forbid")

    variants: List[AttentionVariant] = Field(
        default_factory=lambda: [AttentionVariant.STANDARD, AttentionVariant.SHARED_QKV]
    )
    d_model: int = Field(default=768, gt=0)
    heads: int = Field(default=12, gt=0)
    seq_len: int = Field(default=128, ge=1)
    batch: int = Field(default=8, ge=1)
    ffn_width: Optional[int] = Field(default=None, gt=0)
    trials: int = Field(default=20, ge=20)
    warmup: int = Field(default=5, ge=0)
    precision: Precision = "float64"
    seed: int = Field(default=0, ge=0)

    @field_validator("variants", mode="before")
    @classmethod
    def _parse_variants(cls, value: Any) -> Any:
        return _parse_variant_list(value)

    @model_validator(mode="after")
    def _check_heads(self) -> "BenchConfig":
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        return self


class GradCheckConfig(BaseModel):
    """Finite-difference gradient check settings."""

    model_config = ConfigDict(extra="forbid")

    variants: List[AttentionVariant] = Field(default_factory=lambda: list(AttentionVariant))
    seq_len: int = Field(default=4, ge=1, le=8)
    d_model: int = Field(default=16, gt=0, le=32)
    heads: int = Field(default=2, gt=0)
    bias: bool = False
    step: float = Field(default=1e-5, gt=0.0)
    tolerance: float = Field(default=1e-5, gt=0.0)
    seed: int = Field(default=0, ge=0)

    @field_validator("variants", mode="before")
    @classmethod
    def _parse_variants(cls, value: Any) -> Any:
        return _parse_variant_list(value)

    @model_validator(mode="after")
    def _check_heads(self) -> "GradCheckConfig":
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        return self


class SweepConfig(BaseModel):
    """Noise-robustness sweep settings."""

    model_config = ConfigDict(extra="forbid")

    levels: List[float] = Field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4])
    seeds: int = Field(default=5, ge=1)
    variant_a: AttentionVariant = AttentionVariant.STANDARD
    variant_b: AttentionVariant = AttentionVariant.SHARED_QKV
    eval_examples: int = Field(default=256, ge=1)
    task: TaskName = "toy-classify"

    @field_validator("variant_a", "variant_b", mode="before")
    @classmethod
    def _variant_tags(cls, value: Any) -> Any:
        return _parse_variant(value)

    @field_validator("levels")
    @classmethod
    def _check_levels(cls, value: List[float]) -> List[float]:
        for level in value:
            if not 0.0 <= level <= 0.40:
                raise ValueError(f"noise level {level} outside [0, 0.40]")
        return value


class ConfigBundle(BaseModel):
    """Parsed contents of one JSON config file; every section is optional."""

    model_config = ConfigDict(extra="forbid")

    model: Optional[ModelConfig] = None
    train: Optional[TrainConfig] = None
    noise: Optional[NoiseSpec] = None
    bench: Optional[BenchConfig] = None
    gradcheck: Optional[GradCheckConfig] = None
    sweep: Optional[SweepConfig] = None


class RunManifest(BaseModel):
    """Everything needed to replay one CLI invocation."""

    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: int
    code_version: str
    started_at: str
    finished_at: Optional[str] = None
    outputs: Dict[str, str] = Field(default_factory=dict)
    exit_code: Optional[int] = None


def load_config(path: str) -> ConfigBundle:
    """Load and validate a JSON config file.

    Args:
        path: Path to a JSON file.

    Returns:
        The validated bundle.

    Raises:
        ConfigError: If the file is missing, empty, not JSON, or fails validation.
    """
    file_path = Path(path)
    if not file_path.is_file():
        raise ConfigError(f"Config file not found: {path}")

    text = file_path.read_text(encoding="utf-8").strip()
    if not text:
        raise ConfigError(f"Config file is empty: {path}")

    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")

    if not isinstance(raw, dict) or not raw:
        raise ConfigError(f"Config file {path} must hold a non-empty JSON object")

    try:
        bundle = ConfigBundle(**raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}: {e}")

    logger.debug(f"Loaded config sections {sorted(k for k, v in bundle if v is not None)} from {path}")
    return bundle


def load_preset(name: str) -> ConfigBundle:
    """Load one of the bundled presets (``bert_base``, ``tiny``, ``copy_task``)."""
    path = PRESET_DIR / f"{name}.json"
    if not path.is_file():
        available = sorted(p.stem for p in PRESET_DIR.glob("*.json"))
        raise ConfigError(f"Unknown preset '{name}' (available: {available})")
    return load_config(str(path))


def resolve_out_dir(flag: Optional[str] = None) -> Path:
    """Pick the output directory: flag, then ATTNFORGE_OUT_DIR, then ``outputs``."""
    chosen = flag or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR
    out_dir = Path(chosen)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir

"""
Configuration management for switchdit runs.

Defaults < INI file < environment (SWITCHDIT_OUT_DIR, SWITCHDIT_LOG_LEVEL)
< command-line flags.
"""

import configparser
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from .errors import ConfigError

logger = logging.getLogger(__name__)


class IntegrationMode(str, Enum):
    """How the SMoE output m(z) enters a transformer block."""

    NONE = "none"  # plain DiT block, no gates or experts
    DIRECT = "direct"
    MASK = "mask"
    MASK_SKIP = "mask_skip"
    MASK_INIT = "mask_init"
    MASK_SKIP_INIT = "mask_skip_init"

    @property
    def uses_smoe(self) -> bool:
        return self is not IntegrationMode.NONE

    @property
    def identity_init(self) -> bool:
        return self in (IntegrationMode.MASK_INIT, IntegrationMode.MASK_SKIP_INIT)

    @property
    def skip(self) -> bool:
        return self in (IntegrationMode.MASK_SKIP, IntegrationMode.MASK_SKIP_INIT)


class ModelConfig(BaseModel):
    """Architecture of the toy denoiser."""

    model_config = ConfigDict(frozen=True, extra="forbid", use_enum_values=False)

    image_size: int = Field(16, gt=0, description="square image side in pixels")
    channels: int = Field(1, gt=0, description="image channels")
    patch_size: int = Field(4, gt=0, description="patch side in pixels")
    hidden_size: int = Field(64, gt=0, description="token dimension d")
    frequency_dim: int = Field(64, gt=0, description="sinusoidal timestep embedding size D (even)")
    depth: int = Field(4, gt=0, description="number of transformer blocks N")
    num_heads: int = Field(4, gt=0, description="attention heads")
    mlp_ratio: float = Field(4.0, gt=0, description="feedforward width / d")
    num_experts: int = Field(3, gt=0, description="experts per block M")
    top_k: int = Field(2, gt=0, description="experts selected per block k")
    expert_ratio: float = Field(2.0, gt=0, description="expert hidden width / d")
    num_classes: int = Field(0, ge=0, description="class count, 0 for unconditional")
    integration: IntegrationMode = Field(
        IntegrationMode.MASK_SKIP_INIT, description="SMoE integration mode"
    )
    renormalize_gates: bool = Field(True, description="rescale retained gates to sum to 1")
    noisy_gating: bool = Field(False, description="noisy TopK gating (ablation)")
    class_dropout_prob: float = Field(0.1, ge=0, lt=1, description="label dropout for guidance")
    layer_norm_eps: float = Field(1e-12, gt=0, description="layer norm epsilon")

    @model_validator(mode="after")
    def _check_dimensions(self):
        if self.top_k > self.num_experts:
            raise ValueError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size={self.hidden_size} not divisible by num_heads={self.num_heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size={self.image_size} not divisible by patch_size={self.patch_size}")
        if self.frequency_dim % 2:
            raise ValueError(f"frequency_dim={self.frequency_dim} must be even")
        if self.integration is IntegrationMode.NONE and self.noisy_gating:
            raise ValueError("noisy_gating needs an SMoE integration mode")
        return self

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def conditional(self) -> bool:
        return self.num_classes > 0


class ScheduleConfig(BaseModel):
    """Cosine noise schedule."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    timesteps: int = Field(100, ge=2, description="diffusion steps T")
    cosine_s: float = Field(0.008, gt=0, description="cosine schedule offset s")


class TrainConfig(BaseModel):
    """Everything that determines a training run; serialized into checkpoints."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    dataset: str = Field("blobs", description="blobs | rings | shapes3 | twomode")
    dataset_size: int = Field(2048, gt=0, description="training images generated")
    data_seed: int = Field(0, description="dataset generator seed")
    steps: int = Field(500, ge=0, description="optimizer steps")
    batch_size: int = Field(32, gt=0, description="images per step")
    lr: float = Field(1e-4, gt=0, description="learning rate")
    weight_decay: float = Field(0.0, ge=0, description="decoupled weight decay")
    adam_betas: Tuple[float, float] = Field((0.9, 0.999), description="Adam betas")
    adam_eps: float = Field(1e-8, gt=0, description="Adam epsilon")
    lambda_dp: float = Field(1.0, ge=0, description="weight of the diffusion prior loss")
    lambda_load: float = Field(0.01, ge=0, description="weight of the load-balancing loss")
    load_balance: bool = Field(False, description="add the load-balancing loss (ablation)")
    random_allocation: bool = Field(False, description="random-allocation prior, no matching")
    prior_alpha: float = Field(4.0, gt=0, description="prior exponent alpha")
    normalize_prior: bool = Field(True, description="renormalize prior rows inside the JSD")
    project_prior: bool = Field(
        False, description="regress onto prior rows cut to k experts per block, keeping the current selection"
    )
    match_every: int = Field(1, gt=0, description="rerun matching every R steps")
    ema_decay: float = Field(0.9999, ge=0, lt=1, description="EMA decay")
    ema_every_eval: int = Field(10, gt=0, description="steps between EMA routing checks")
    hflip: bool = Field(True, description="random horizontal flips")
    seed: int = Field(0, description="init and batch seed")
    log_every: int = Field(50, gt=0, description="steps between progress logs")
    model: ModelConfig = Field(default_factory=ModelConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)

    @field_validator("adam_betas", mode="before")
    @classmethod
    def _parse_betas(cls, value):
        if isinstance(value, str):
            return tuple(float(v) for v in value.strip("()[] ").split(","))
        return value

    @model_validator(mode="after")
    def _check_combination(self):
        m = self.model
        if not m.integration.uses_smoe:
            if self.lambda_dp > 0 or self.load_balance or self.random_allocation:
                raise ValueError(
                    "integration 'none' is the plain DiT baseline: "
                    "set lambda_dp=0 and disable gating ablations"
                )
        elif self.lambda_dp > 0 and m.top_k >= m.num_experts:
            raise ValueError(
                f"prior-based training needs top_k < num_experts (got k={m.top_k}, M={m.num_experts})"
            )
        if self.random_allocation and (m.num_experts, m.top_k) != (3, 2):
            raise ValueError("random_allocation is defined only for num_experts=3, top_k=2")
        if any(not 0 <= b < 1 for b in self.adam_betas):
            raise ValueError(f"adam_betas {self.adam_betas} must lie in [0, 1)")
        return self


class SampleConfig(BaseModel):
    """Sampling options."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_samples: int = Field(64, gt=0, description="images to generate")
    steps: int = Field(250, gt=0, description="sampling steps (clipped to T)")
    guidance: float = Field(1.5, ge=1, description="classifier-free guidance scale")
    label: Optional[int] = Field(None, ge=0, description="class label, empty for round-robin")
    seed: int = Field(0, description="sampling seed")


class RunConfig(BaseModel):
    """A whole INI file: [model] [schedule] [train] [sample] [output]."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    train: TrainConfig = Field(default_factory=TrainConfig)
    sample: SampleConfig = Field(default_factory=SampleConfig)
    out_dir: Path = Field(Path("runs"), description="artifact directory")


class AppSettings(BaseSettings):
    """Environment-level settings."""

    out_dir: Path = Path("runs")
    log_level: str = "INFO"

    class Config:
        env_prefix = "SWITCHDIT_"
        env_file = ".env"
        extra = "ignore"


SECTIONS = ("model", "schedule", "train", "sample", "output")

ABLATIONS: Dict[str, Dict[str, Any]] = {
    "noisy": {"lambda_dp": 0.0, "model": {"noisy_gating": True}},
    "load-balance": {"lambda_dp": 0.0, "load_balance": True},
    "noisy-load": {"lambda_dp": 0.0, "load_balance": True, "model": {"noisy_gating": True}},
    "noisy-dp": {"model": {"noisy_gating": True}},
    "no-dp": {"lambda_dp": 0.0},
    "random-allocation": {"random_allocation": True},
    "direct": {"model": {"integration": "direct"}},
    "mask": {"model": {"integration": "mask"}},
    "mask-skip": {"model": {"integration": "mask_skip"}},
    "mask-init": {"model": {"integration": "mask_init"}},
    "dit": {"lambda_dp": 0.0, "model": {"integration": "none"}},
}


def _deep_merge(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "config"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def validate_train_config(data: Dict[str, Any]) -> TrainConfig:
    """Build a TrainConfig from plain data, raising ConfigError on any problem."""
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def update_train_config(cfg: TrainConfig, **updates) -> TrainConfig:
    """Return a re-validated copy with nested updates applied."""
    return validate_train_config(_deep_merge(cfg.model_dump(mode="json"), updates))


def apply_ablation(cfg: TrainConfig, name: Optional[str]) -> TrainConfig:
    if not name:
        return cfg
    if name not in ABLATIONS:
        raise ConfigError(f"Unknown ablation '{name}' (choose from {', '.join(ABLATIONS)})")
    logger.info(f"Applying ablation preset '{name}'")
    return update_train_config(cfg, **ABLATIONS[name])


def _ini_value(raw: str) -> Optional[str]:
    raw = raw.strip()
    return None if raw.lower() in ("", "none", "null") else raw


def load_run_config(path: Optional[Path] = None, settings: Optional[AppSettings] = None) -> RunConfig:
    """Read an INI file (optional) and layer environment settings on top.

    Raises:
        ConfigError: unreadable file, unknown section or key, invalid value.
    """
    settings = settings if settings is not None else AppSettings()
    sections: Dict[str, Dict[str, Optional[str]]] = {name: {} for name in SECTIONS}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"Malformed config file {path}: {exc}") from None
        if parser.defaults():
            raise ConfigError(f"{path}: keys outside a section are not allowed")
        for section in parser.sections():
            if section not in sections:
                raise ConfigError(f"{path}: unknown section [{section}]")
            sections[section] = {k: _ini_value(v) for k, v in parser.items(section)}
        logger.info(f"Loaded config from {path}")

    output = sections.pop("output")
    unknown = sorted(set(output) - {"out_dir"})
    if unknown:
        raise ConfigError(f"[output]: unknown key(s) {', '.join(unknown)}")
    out_dir = output.get("out_dir") or RunConfig.model_fields["out_dir"].default
    if "out_dir" in settings.model_fields_set:
        out_dir = settings.out_dir

    train = dict(sections["train"])
    train["model"] = {k: v for k, v in sections["model"].items() if v is not None}
    train["schedule"] = {k: v for k, v in sections["schedule"].items() if v is not None}
    train = {k: v for k, v in train.items() if v is not None}
    sample = dict(sections["sample"])
    try:
        return RunConfig(
            train=TrainConfig.model_validate(train),
            sample=SampleConfig.model_validate(sample),
            out_dir=Path(out_dir),
        )
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def _default_lines(model: type, section: str) -> list:
    lines = [f"[{section}]"]
    for name, field in model.model_fields.items():
        if name in ("model", "schedule"):
            continue
        default = field.default
        if isinstance(default, Enum):
            default = default.value
        elif isinstance(default, tuple):
            default = ", ".join(str(v) for v in default)
        elif default is None:
            default = ""
        lines.append(f"# {field.description}")
        lines.append(f"{name} = {default}")
    return lines


def default_ini() -> str:
    """The complete default configuration as a commented INI document."""
    lines = []
    for model, section in (
        (ModelConfig, "model"),
        (ScheduleConfig, "schedule"),
        (TrainConfig, "train"),
        (SampleConfig, "sample"),
    ):
        lines.extend(_default_lines(model, section))
        lines.append("")
    lines.extend(["[output]", "# artifact directory (env SWITCHDIT_OUT_DIR overrides)", "out_dir = runs", ""])
    return "\n".join(lines)

"""
Configuration for the self-synthesis meta-learning pipeline

Two layers:
- Settings: process-level knobs (logging) read from the environment / .env
- RunConfig: every experiment hyperparameter; read from a flat key=value
  config file, MASS_-prefixed environment variables, or defaults
"""

from io import StringIO
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

from dotenv import dotenv_values
from pydantic import ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from utils.errors import UsageError


class Settings(BaseSettings):
    """Process settings with validation"""

    environment: str = "development"
    log_level: str = "INFO"
    log_format: Literal["console", "json"] = "console"

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=False, extra="ignore")


class RunConfig(BaseSettings):
    """
    Resolved hyperparameters of one run.

    Defaults for m, k, K, meta steps, warmup and the test-time example count
    follow the published setup; inner_lr, gamma, clip_epsilon, meta_batch_size
    and the learning rates are desk-scale choices.
    """

    master_seed: int = 0

    # Meta-training loop
    n_candidates: int = 12
    n_attempts: int = 6
    inner_steps: int = 2
    inner_lr: float = 0.1
    meta_steps: int = 100
    warmup_steps: int = 20
    test_time_examples: int = 6
    outer_variant: Literal["verified", "gold"] = "verified"
    backend: Literal["adjoint", "unroll"] = "adjoint"
    checkpoint_block: int = 1
    gamma: float = 0.5
    clip_epsilon: float = 0.2
    unparsed_penalty: float = 1.0
    meta_batch_size: int = 4
    meta_lr: float = 1e-2
    generator_lr: float = 1e-3

    # Sampling
    gen_temperature: float = 0.8
    attempt_temperature: float = 1.0
    max_aux_tokens: int = 10
    max_answer_tokens: int = 4

    # Generator / solver model
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    context: int = 128
    lora_rank: int = 4
    lora_scale: float = 0.5

    # Scorer
    scorer_width: int = 16
    scorer_heads: int = 2
    scorer_context: int = 64

    # Task family
    modulus_min: int = 7
    modulus_max: int = 23
    n_demos: int = 3
    n_train_tasks: int = 500
    n_eval_tasks: int = 200
    eval_rule_fraction: float = 0.2

    # Base-model warm start
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 8
    pretrain_aux_noise: float = 0.5

    # Bookkeeping
    checkpoint_every: int = 20
    threads: int = 1

    model_config = SettingsConfigDict(env_prefix="MASS_", case_sensitive=False, extra="forbid")

    @model_validator(mode="after")
    def _check_ranges(self) -> "RunConfig":
        counts = {
            name: getattr(self, name)
            for name, field in type(self).model_fields.items()
            if field.annotation is int and name != "master_seed"
        }
        negative = [name for name, value in counts.items() if value < 0]
        if negative:
            raise ValueError(f"counts must be >= 0: {negative}")
        if self.warmup_steps > self.meta_steps:
            raise ValueError("warmup_steps must not exceed meta_steps")
        for name in ("inner_lr", "meta_lr", "generator_lr", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.n_attempts < 1 and self.outer_variant == "verified":
            raise ValueError("verified outer loss needs n_attempts >= 1")
        if self.modulus_min > self.modulus_max:
            raise ValueError("modulus_min must not exceed modulus_max")
        if self.n_demos >= self.modulus_min:
            raise ValueError("n_demos must be smaller than modulus_min")
        if self.checkpoint_block < 1:
            raise ValueError("checkpoint_block must be >= 1")
        if self.d_model % max(self.n_heads, 1) or self.scorer_width % max(self.scorer_heads, 1):
            raise ValueError("model widths must be divisible by their head counts")
        return self

    def to_config_text(self) -> str:
        """Flat key=value text; floats use repr so the round trip is lossless"""
        lines = []
        for name in type(self).model_fields:
            value = getattr(self, name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{name}={text}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Validated copy with some fields replaced"""
        values = {**self.model_dump(), **overrides}
        try:
            return RunConfig(**values)
        except ValidationError as e:
            raise UsageError("invalid config override", hint=_first_error(e)) from e


def _first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first.get("loc", ())) or "config"
    return f"{location}: {first.get('msg')}"


def parse_config_text(text: str) -> Dict[str, Optional[str]]:
    """Parse key=value text with dotenv rules"""
    return dict(dotenv_values(stream=StringIO(text)))


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Build a RunConfig from a config file (if given), env vars and defaults

    Raises:
        UsageError: unknown key or invalid value
        OSError: unreadable file
    """
    values: Dict[str, Optional[str]] = {}
    if path is not None:
        values = parse_config_text(Path(path).read_text(encoding="utf-8"))

    known = set(RunConfig.model_fields)
    unknown = sorted(key for key in values if key not in known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}", hint=str(path))

    try:
        return RunConfig(**{k: v for k, v in values.items() if v is not None})
    except ValidationError as e:
        raise UsageError("invalid config", hint=_first_error(e)) from e


def save_run_config(path: Union[str, Path], config: RunConfig) -> None:
    Path(path).write_text(config.to_config_text(), encoding="utf-8")


def differing_fields(a: RunConfig, b: RunConfig, fields: Optional[Sequence[str]] = None) -> List[str]:
    """Names of the fields (all, or those listed) whose values differ between two configs"""
    names = RunConfig.model_fields if fields is None else fields
    return [name for name in names if getattr(a, name) != getattr(b, name)]


# Fields that determine the task sets and the pretrained base model
TASK_FIELDS = (
    "master_seed", "modulus_min", "modulus_max", "n_demos",
    "n_train_tasks", "n_eval_tasks", "eval_rule_fraction",
)
BASE_MODEL_FIELDS = TASK_FIELDS + (
    "d_model", "n_blocks", "n_heads", "context", "lora_rank", "lora_scale",
    "pretrain_steps", "pretrain_lr", "pretrain_batch", "pretrain_aux_noise",
)


def fields_text(config: RunConfig, fields: Sequence[str]) -> str:
    """key=value lines for the listed fields, in the same format as to_config_text"""
    wanted = set(fields)
    return "".join(line + "\n" for line in config.to_config_text().splitlines() if line.split("=", 1)[0] in wanted)


# Initialize settings (lazy loading)
settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get or create settings instance"""
    global settings
    if settings is None:
        settings = Settings()
    return settings

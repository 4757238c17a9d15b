"""
Configuration Settings
Process-level settings come from the environment (.env supported); run-level
knobs come from a JSON file validated into RunConfig.
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Union

import orjson
import structlog
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigError
from .utils.security import validate_endpoint_url

# Load environment variables
load_dotenv()

logger = structlog.get_logger()

# LLM backend credentials
API_KEY_ENV = "RDREC_LLM_API_KEY"

# Logging Configuration
LOG_LEVEL = os.getenv("RDREC_LOG_LEVEL", "INFO")

# torch intra-op threads; determinism is guaranteed at 1
THREADS = int(os.getenv("RDREC_THREADS", "1"))

# Distillation response cache
CACHE_DIR = Path(os.getenv("RDREC_CACHE_DIR", ".rdrec_cache/llm"))

# Learning rates from the reference training setup
DATASET_LEARNING_RATES = {
    "sports": 1e-3,
    "beauty": 5e-4,
    "toys": 5e-4,
}


def get_api_key() -> Optional[str]:
    return os.getenv(API_KEY_ENV)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class TaskRatio(_Section):
    """Sampling proportion EG:RG:SR:TR"""

    eg: int = Field(1, ge=1)
    rg: int = Field(1, ge=1)
    sr: int = Field(1, ge=1)
    tr: int = Field(3, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _parse_shorthand(cls, value: Any) -> Any:
        # "1:1:1:3" or [1, 1, 1, 3]
        if isinstance(value, str):
            value = [part.strip() for part in value.split(":")]
        if isinstance(value, (list, tuple)):
            if len(value) != 4:
                raise ValueError("ratio needs four parts EG:RG:SR:TR")
            try:
                eg, rg, sr, tr = (int(part) for part in value)
            except (TypeError, ValueError):
                raise ValueError(f"ratio parts must be integers: {value!r}")
            return {"eg": eg, "rg": rg, "sr": sr, "tr": tr}
        return value

    def as_tuple(self):
        return (self.eg, self.rg, self.sr, self.tr)

    def __str__(self) -> str:
        return ":".join(str(part) for part in self.as_tuple())


class BackendConfig(_Section):
    """Large-LM backend used for rationale distillation"""

    kind: Literal["mock", "http", "openai"] = "mock"
    endpoint: Optional[str] = None
    timeout: float = Field(60.0, gt=0)
    max_retries: int = Field(3, ge=0, le=20)
    max_concurrency: int = Field(4, ge=1, le=256)
    cache_dir: Path = CACHE_DIR
    use_cache: bool = True
    max_tokens: int = Field(128, ge=8)
    model: str = "llama-2-7b-chat"
    temperature: float = Field(0.0, ge=0.0, le=2.0)
    short_review_tokens: int = Field(5, ge=0)
    failure_threshold: float = Field(0.5, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_endpoint(self) -> "BackendConfig":
        if self.kind == "http" and not self.endpoint:
            raise ValueError("http backend requires an endpoint")
        if self.endpoint:
            validate_endpoint_url(self.endpoint)
        return self


class CorpusConfig(_Section):
    min_len: int = Field(3, ge=3)
    lenient: bool = False
    max_history: int = Field(20, ge=1)


class CodecConfig(_Section):
    vocab_cap: int = Field(2048, ge=16)


class ModelConfig(_Section):
    """Encoder-decoder shape; the reference scale is 6 layers / 8 heads / 512 dims"""

    n_layers: int = Field(2, ge=1, le=24)
    n_heads: int = Field(4, ge=1)
    d_model: int = Field(64, ge=4)
    d_ff: int = Field(256, ge=4)
    vocab_size: int = Field(2048, ge=4)
    max_seq_len: int = Field(512, ge=8)
    n_prompt_per_task: int = Field(3, ge=1)
    n_tasks: int = Field(5, ge=1)
    whole_word_capacity: int = Field(128, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self


class TrainerConfig(_Section):
    batch_size: int = Field(64, ge=1)
    lr: float = Field(5e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    patience: int = Field(5, ge=1)
    max_epochs: int = Field(50, ge=1)
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    ratios: TaskRatio = Field(default_factory=TaskRatio)
    n_negatives: int = Field(99, ge=1)
    use_preference: bool = True
    use_attribute: bool = True
    dataset_preset: Optional[Literal["sports", "beauty", "toys"]] = None

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, value: Any) -> Any:
        if isinstance(value, dict) and value.get("dataset_preset") and "lr" not in value:
            preset = value["dataset_preset"]
            if preset in DATASET_LEARNING_RATES:
                value = {**value, "lr": DATASET_LEARNING_RATES[preset]}
        return value


class BeamConfig(_Section):
    beam_width: int = Field(20, ge=1)
    max_len: int = Field(32, ge=1)
    length_penalty: float = Field(0.0, ge=0.0)


class EvaluateConfig(_Section):
    ks: List[int] = Field(default_factory=lambda: [1, 5, 10])
    sr_candidates: Optional[int] = Field(None, ge=1)
    strict_candidates: bool = False
    trials: int = Field(1, ge=1)
    paired: bool = False

    @field_validator("ks")
    @classmethod
    def _check_ks(cls, ks: List[int]) -> List[int]:
        if not ks or any(k < 1 for k in ks):
            raise ValueError("ks must be a non-empty list of positive integers")
        return sorted(set(ks))


class PathsConfig(_Section):
    """Artifact locations; anything unset lives under work_dir"""

    work_dir: Path = Path("runs/default")
    reviews: Optional[Path] = None
    quads: Optional[Path] = None
    splits: Optional[Path] = None
    vocab: Optional[Path] = None
    entities: Optional[Path] = None
    candidates: Optional[Path] = None
    checkpoints: Optional[Path] = None
    reports: Optional[Path] = None

    @model_validator(mode="after")
    def _fill_defaults(self) -> "PathsConfig":
        defaults = {
            "reviews": "reviews.jsonl",
            "quads": "quads.jsonl",
            "splits": "splits.jsonl",
            "vocab": "vocab.txt",
            "entities": "entities.json",
            "candidates": "candidates.jsonl",
            "checkpoints": "checkpoints",
            "reports": "reports",
        }
        for name, relative in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, self.work_dir / relative)
        return self

    def ensure_dirs(self) -> None:
        for directory in (self.work_dir, self.checkpoints, self.reports):
            try:
                Path(directory).mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise ConfigError(f"paths: cannot create {directory}: {e}")


class RunConfig(_Section):
    paths: PathsConfig = Field(default_factory=PathsConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    distill: BackendConfig = Field(default_factory=BackendConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    beam: BeamConfig = Field(default_factory=BeamConfig)
    evaluate: EvaluateConfig = Field(default_factory=EvaluateConfig)
    seed: int = Field(0, ge=0)
    threads: int = Field(THREADS, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _hoist_ratios(cls, value: Any) -> Any:
        # top-level "ratios" is shorthand for trainer.ratios
        if isinstance(value, dict) and "ratios" in value:
            value = dict(value)
            ratios = value.pop("ratios")
            trainer = dict(value.get("trainer") or {})
            trainer.setdefault("ratios", ratios)
            value["trainer"] = trainer
        return value

    def echo(self) -> Dict[str, Any]:
        """Effective configuration as plain JSON types"""
        return self.model_dump(mode="json")


def _format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{path}: {item['msg']}")
    return "; ".join(lines)


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def parse_override(expression: str) -> tuple:
    """Split ``key.path=value``; the value is JSON when it parses, else a string"""
    if "=" not in expression:
        raise ConfigError(f"override must look like key.path=value: {expression!r}")
    key, raw = expression.split("=", 1)
    try:
        value = orjson.loads(raw)
    except orjson.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_config(raw: Mapping[str, Any], overrides: Sequence[str] = (),
                 updates: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Validate a raw mapping into a RunConfig; `--set` overrides apply first, then typed updates"""
    if not isinstance(raw, Mapping):
        raise ConfigError("top level must be a JSON object")
    tree: Dict[str, Any] = orjson.loads(orjson.dumps(dict(raw)))
    for expression in overrides:
        key, value = parse_override(expression)
        _set_dotted(tree, key, value)
    for key, value in (updates or {}).items():
        if value is not None:
            _set_dotted(tree, key, value)
    try:
        config = RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e))
    logger.info("Effective configuration", config=config.echo())
    return config


def parse_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
                 updates: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Parse a JSON run configuration

    Args:
        path: JSON file; None means all defaults
        overrides: ``key.path=value`` expressions applied on top
        updates: dotted key to value, applied last (None values are ignored)

    Returns:
        Validated RunConfig with defaults filled

    Raises:
        ConfigError: unreadable file, invalid JSON, unknown key, type or range error
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = orjson.loads(Path(path).read_bytes())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except orjson.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}")
    return build_config(raw, overrides, updates)

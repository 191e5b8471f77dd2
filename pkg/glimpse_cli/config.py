"""Runtime settings and experiment configuration."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Type, TypeVar

from dotenv import load_dotenv

from .env import EnvConfig, RewardConfig
from .errors import ConfigurationError, UsageError
from .infer import InferenceConfig
from .mcts import SearchConfig
from .state import RolloutLimits
from .train import GrpoConfig, SftConfig

T = TypeVar("T")


def _default_db_url() -> str:
    return "sqlite:///.glimpse/runs.db"


@dataclass(frozen=True)
class Settings:
    db_url: str
    output_dir: Path
    log_dir: Path
    log_level: str
    workers: int


def load_settings() -> Settings:
    load_dotenv()

    raw_workers = os.getenv("GLIMPSE_WORKERS", "1")
    try:
        workers = int(raw_workers)
    except ValueError as exc:
        raise ConfigurationError(f"GLIMPSE_WORKERS must be an integer, got {raw_workers!r}") from exc
    if workers < 1:
        raise ConfigurationError("GLIMPSE_WORKERS must be >= 1")

    return Settings(
        db_url=os.getenv("GLIMPSE_DB_URL", _default_db_url()),
        output_dir=Path(os.getenv("GLIMPSE_OUTPUT_DIR", "runs")),
        log_dir=Path(os.getenv("GLIMPSE_LOG_DIR", ".glimpse/logs")),
        log_level=os.getenv("GLIMPSE_LOG_LEVEL", "INFO"),
        workers=workers,
    )


def ensure_runtime_directories(settings: Settings) -> None:
    settings.output_dir.mkdir(parents=True, exist_ok=True)
    settings.log_dir.mkdir(parents=True, exist_ok=True)

    if settings.db_url.startswith("sqlite:///"):
        db_file = Path(settings.db_url.replace("sqlite:///", "", 1))
        if db_file.parent != Path("/"):
            db_file.parent.mkdir(parents=True, exist_ok=True)


@dataclass(frozen=True)
class CorpusConfig:
    train_episodes: int = 100
    eval_episodes: int = 200

    def __post_init__(self) -> None:
        if self.train_episodes < 1 or self.eval_episodes < 1:
            raise ConfigurationError("corpus sizes must be >= 1")


@dataclass(frozen=True)
class PolicyConfig:
    hidden_units: int = 0
    temperature: float = 1.0
    init_scale: float = 0.1

    def __post_init__(self) -> None:
        if self.hidden_units < 0:
            raise ConfigurationError("policy.hidden_units must be >= 0")
        if not self.temperature > 0:
            raise ConfigurationError("policy.temperature must be > 0")
        if self.init_scale < 0:
            raise ConfigurationError("policy.init_scale must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    verify_coverage: bool = True
    speculate: bool = True
    dump_trees: bool = False


@dataclass(frozen=True)
class MtdpConfig:
    fraction: float = 0.15

    def __post_init__(self) -> None:
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError(f"mtdp.fraction must lie in (0, 1], got {self.fraction}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    limits: RolloutLimits = field(default_factory=RolloutLimits)
    reward: RewardConfig = field(default_factory=RewardConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    data: DataConfig = field(default_factory=DataConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    mtdp: MtdpConfig = field(default_factory=MtdpConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)


SECTIONS: Dict[str, type] = {f.name: f.default_factory for f in fields(ExperimentConfig) if f.name != "seed"}  # type: ignore[misc]


def _coerce(value: Any, default: Any, name: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{name} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str) and value.lower() in ("inf", "infinity"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{name} must be a number, got {value!r}")
        value = float(value)
        if math.isnan(value):
            raise ConfigurationError(f"{name} must not be NaN")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{name} must be a string, got {value!r}")
        return value
    raise ConfigurationError(f"{name} has an unsupported type")


def _parse_section(cls: Type[T], payload: Any, section: str) -> T:
    if not isinstance(payload, Mapping):
        raise ConfigurationError(f"{section} must be an object")
    defaults = cls()
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    for key in payload:
        if key not in known:
            raise ConfigurationError(f"unknown field {section}.{key}")
    values = {
        key: _coerce(payload[key], getattr(defaults, key), f"{section}.{key}") for key in payload
    }
    try:
        return cls(**values)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{section}: {exc}") from exc


def parse_config(payload: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a config document; every error names the offending dotted field."""
    if not isinstance(payload, Mapping):
        raise ConfigurationError("config must be a JSON object")
    for key in payload:
        if key != "seed" and key not in SECTIONS:
            raise ConfigurationError(f"unknown field {key}")

    seed = payload.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigurationError(f"seed must be a non-negative integer, got {seed!r}")

    sections = {name: _parse_section(cls, payload.get(name, {}), name) for name, cls in SECTIONS.items()}
    config = ExperimentConfig(seed=seed, **sections)
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    config.env.validate()
    if config.env.max_frame_gap > config.limits.window:
        raise ConfigurationError(
            f"env.max_frame_gap ({config.env.max_frame_gap}) exceeds limits.window ({config.limits.window})"
        )
    if config.env.chain_length > config.limits.max_steps:
        raise ConfigurationError(
            f"env.chain_length ({config.env.chain_length}) exceeds limits.max_steps ({config.limits.max_steps})"
        )


def emit_config(config: ExperimentConfig) -> Dict[str, Any]:
    payload: Dict[str, Any] = {"seed": config.seed}
    for name in SECTIONS:
        section = getattr(config, name)
        assert is_dataclass(section)
        payload[name] = asdict(section)
    return payload


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(emit_config(config)).encode("utf-8")).hexdigest()


def override(config: ExperimentConfig, dotted: str, value: Any) -> ExperimentConfig:
    """Copy of the config with one dotted field replaced, validated like a parsed file."""
    payload = emit_config(config)
    if dotted == "seed":
        payload["seed"] = value
        return parse_config(payload)
    section, _, key = dotted.partition(".")
    if section not in SECTIONS or not key:
        raise ConfigurationError(f"unknown field {dotted}")
    payload[section][key] = value
    return parse_config(payload)


def load_config(path: Path) -> ExperimentConfig:
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"Config file not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"Failed to parse config file {path}: {exc}") from exc
    try:
        return parse_config(payload)
    except ConfigurationError as exc:
        raise UsageError(f"Invalid config {path}: {exc}") from exc

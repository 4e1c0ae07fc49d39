"""
Run configuration model and utilities.

One structured-text file (YAML; JSON also loads) describes a whole run:
the synthetic world, training, evaluation and the ablation switches. Keys
that are absent fall back to their defaults.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from faalab.errors import ConfigError
from faalab.evalsuite import EvalConfig
from faalab.synthworld import WorldConfig
from faalab.trainer import AblationConfig, TrainConfig

logger = logging.getLogger(__name__)


class RunConfig(BaseModel):
    """
    Complete run configuration.

    Sections mirror the pipeline stages; each is a model with its own defaults.
    """

    world: WorldConfig = Field(default_factory=WorldConfig, description="Synthetic world parameters")
    train: TrainConfig = Field(default_factory=TrainConfig, description="Training loop parameters")
    eval: EvalConfig = Field(default_factory=EvalConfig, description="Trial counts, seeds and shortlist size")
    ablation: AblationConfig = Field(default_factory=AblationConfig, description="Ablation switches")

    @model_validator(mode="after")
    def validate_fixed_clusters(self):
        """fixed_C must not exceed the number of training videos of the configured world."""
        if self.ablation.fixed_C is not None:
            train_videos = self.world.partition_sizes()["train"] * self.world.videos_per_identity
            if self.ablation.fixed_C > train_videos:
                raise ValueError(
                    f"ablation.fixed_C ({self.ablation.fixed_C}) exceeds the {train_videos} training videos"
                )
        return self

    def canonical_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form."""
        canonical = json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    @classmethod
    def default(cls) -> "RunConfig":
        """Get default configuration."""
        return cls()


def _format_validation_error(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        location = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{location}: {err['msg']}")
    return "; ".join(parts)


def parse_run_config(data: Optional[Dict[str, Any]]) -> RunConfig:
    """
    Validate a mapping into a RunConfig.

    Raises:
        ConfigError: With the offending field path in the message
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {_format_validation_error(e)}")


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load a run configuration file; no path means all defaults.

    Raises:
        ConfigError: If the file is missing, unparsable or invalid
    """
    if path is None:
        return RunConfig.default()
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        data = yaml.safe_load(config_path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {config_path} is not valid YAML: {e}")
    config = parse_run_config(data)
    logger.debug(f"Loaded run config {config_path} (hash {config.config_hash()[:12]})")
    return config


def dump_run_config(config: RunConfig, path: Union[str, Path]) -> None:
    """Write the fully-resolved configuration next to run outputs."""
    Path(path).write_text(yaml.safe_dump(config.canonical_dict(), sort_keys=True))

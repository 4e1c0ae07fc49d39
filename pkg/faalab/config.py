"""
Process-level settings loaded from the environment using Pydantic Settings
"""

import logging
from functools import lru_cache

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Settings read from FAA_* environment variables or a .env file"""

    model_config = SettingsConfigDict(
        env_prefix="FAA_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Parallelism (only used where results stay bit-identical)
    threads: int = Field(default=1, ge=1, le=256)

    # Logging
    log_level: str = "INFO"
    log_format: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Default locations for CLI outputs
    data_dir: str = "./data"
    output_dir: str = "./runs"

    # DEBUG logging when no explicit level is given
    debug: bool = False


@lru_cache()
def get_settings() -> Settings:
    """
    Cached settings instance.
    Using lru_cache ensures we only create one Settings instance.
    """
    return Settings()


def configure_logging(level: str = "", fmt: str = "") -> None:
    """Configure the root logger from settings unless explicit values are given."""
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, (level or settings.log_level).upper(), logging.INFO),
        format=fmt or settings.log_format,
        force=True,
    )

"""
Module: core.config
------------------

Runtime settings that are not part of an experiment: logging, worker pool
size, API CORS origins and the sizes of the verification suites. Values are
read from environment variables with the ``PROTOOCC_`` prefix or an optional
``.env`` file.

Experiment hyperparameters live in ``app.schemas.config.ExperimentConfig``.
"""

from functools import lru_cache
from typing import List, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings"""

    model_config = SettingsConfigDict(
        env_prefix="PROTOOCC_", env_file=".env", extra="ignore"
    )

    # Logging
    log_level: str = "INFO"
    log_format: Optional[str] = None

    # Execution
    workers: int = 1
    default_scene_dir: str = "scenes"

    # Verification suites
    check_instances: int = 20
    oracle_instances: int = 100

    # API
    allowed_origins: List[str] = ["http://localhost", "http://localhost:3000"]


@lru_cache()
def get_settings() -> Settings:
    """Returns cached settings instance"""
    return Settings()

"""Process settings loaded from environment variables.

Run-level experiment configuration (data, model, training, evaluation)
lives in ``app.schemas.RunConfig`` and is read from a JSON file; the
settings here only cover how the process itself behaves.
"""

from functools import lru_cache
from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # ---- Parallelism ----
    threads: int = Field(default=1, ge=1)  # Worker cap for rendering / evaluation

    # ---- Numerics ----
    precision: Literal["f32", "f64"] = "f32"  # Fallback when neither config nor flag decides

    # ---- App ----
    log_level: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="EGR_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


@lru_cache()
def get_settings() -> Settings:
    """Cached singleton accessor for process settings."""
    return Settings()

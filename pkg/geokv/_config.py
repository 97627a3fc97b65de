"""Configuration management using pydantic-settings."""

from __future__ import annotations

from pathlib import Path
from pydantic_settings import BaseSettings, SettingsConfigDict


class GeoKVSettings(BaseSettings):
    """Process-level overrides for the CLI, read from the environment.

    Everything that shapes a simulation lives in the config document; the environment can only
    override the seed and where outputs go. Variables use the prefix GEOKV_, for example
    GEOKV_SEED=7 or GEOKV_OUT_DIR=/tmp/runs.
    """

    model_config = SettingsConfigDict(
        env_prefix="GEOKV_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    seed: int | None = None
    """Seed override applied on top of the config document. Defaults to None (use the document's seed)."""

    out_dir: Path = Path("out")
    """Output directory for reports, logs and plots. Defaults to ./out."""

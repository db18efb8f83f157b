"""
Configuration settings for the disc grading pipeline.
"""
from pathlib import Path
from typing import Optional
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field


class Settings(BaseSettings):
    """Process-wide settings with environment variable support (prefix DISC_GRADE_)."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="DISC_GRADE_",
        extra="ignore",
    )

    # Application settings
    app_name: str = "Disc Grade"
    app_version: str = "1.0.0"

    # Logging
    log_level: str = Field(default="INFO", description="Log level")
    log_file: Optional[str] = Field(
        default="disc_grade.log", description="Log file name"
    )
    logs_dir: str = Field(default="logs", description="Directory for log files")

    # Paths
    data_dir: str = Field(
        default="./datasets", description="Default data root for CLI paths"
    )
    output_dir: str = Field(
        default="./runs", description="Default output root for runs"
    )

    # Compute
    device: str = Field(default="cpu", description="Torch device (cpu/cuda)")
    num_threads: Optional[int] = Field(
        default=None, description="Torch intra-op threads"
    )

    def resolve_data_path(self, path: str) -> str:
        """Resolve a relative CLI path against the data root.

        Paths that exist as given are returned unchanged.
        """
        candidate = Path(path)
        if candidate.is_absolute() or candidate.exists():
            return str(candidate)
        rooted = Path(self.data_dir) / candidate
        return str(rooted) if rooted.exists() else str(candidate)


# Global settings instance
settings = Settings()

from functools import lru_cache
import logging
from typing import Optional

from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict
from rich.console import Console
from rich.logging import RichHandler

# Load environment variables
load_dotenv()


class Settings(BaseSettings):
    """
    Process-wide settings loaded from environment variables (prefix FRAGMIX_) and .env
    """
    model_config = SettingsConfigDict(env_prefix="FRAGMIX_", env_file=".env", env_file_encoding="utf-8", extra="ignore")

    # Overrides the seed of any run configuration when set
    seed: Optional[int] = None

    log_level: str = "INFO"

    # Relative output paths are resolved against this directory
    work_dir: str = "."


@lru_cache()
def get_settings() -> Settings:
    """
    Get cached settings to avoid re-reading the environment on every call
    """
    return Settings()


def configure_logging(level: Optional[str] = None) -> logging.Logger:
    """Attach a single rich handler, writing to stderr, to the package logger"""
    log = logging.getLogger("fragmix")
    log.setLevel((level or get_settings().log_level).upper())
    if not any(isinstance(h, RichHandler) for h in log.handlers):
        log.addHandler(RichHandler(console=Console(stderr=True), show_path=False))
    log.propagate = False
    return log

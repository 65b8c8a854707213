from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Optional with defaults
    threads: Optional[int] = None  # caps inference fan-out workers
    log_level: str = "INFO"
    log_format: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"
    checkpoint_interval: int = 500
    default_config: Path = Path("configs/toy.json")

    model_config = SettingsConfigDict(
        env_prefix="CANSEG_",
        env_file=".env",
        extra="ignore",
    )


settings = Settings()

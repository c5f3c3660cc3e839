from __future__ import annotations

from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

# Reference-scale values of the GPT-2 sized setup. The desk-scale defaults used
# throughout the package live next to the types they configure.
REFERENCE_N_LAYERS = 12
REFERENCE_KV_DIM = 1024
REFERENCE_VALUES_PER_FEATURE = 128
REFERENCE_PREFIX_MLP_HIDDEN = 512
REFERENCE_PREFIX_EMBED_DIM = 512
REFERENCE_LEARNING_RATE = 1e-5
REFERENCE_BATCH_SIZE = 4
REFERENCE_STAR_DROPOUT = 0.1
REFERENCE_REGULARIZER = 0.01


class Settings(BaseSettings):
    """Process-level settings read from the environment, `.env` and `secrets.env`."""

    model_config = SettingsConfigDict(
        env_file=(".env", "secrets.env"),
        env_file_encoding="utf-8",
        extra="ignore",
    )

    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: Literal["plain", "json"] = "plain"
    LOG_FILE: Optional[Path] = None
    MIXEDPREFIX_OUT_DIR: Path = Path("./runs")
    MIXEDPREFIX_WORKERS: int = 1
    # Global smooth nonlinearity; recorded in every checkpoint header.
    MIXEDPREFIX_NONLINEARITY: Literal["gelu", "tanh"] = "gelu"


def load_env_files(root: Path = Path(".")) -> list[Path]:
    """Load .env and secrets.env from `root` and its parent without overriding the shell."""
    root = Path(root).resolve()
    loaded = []
    for candidate in (root / ".env", root / "secrets.env", root.parent / ".env", root.parent / "secrets.env"):
        if candidate.exists():
            load_dotenv(candidate, override=False)
            loaded.append(candidate)
    return loaded


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()


def reset_settings() -> None:
    get_settings.cache_clear()

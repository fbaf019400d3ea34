"""
Environment settings (.env aware)
"""

import os
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()


@dataclass(frozen=True)
class Settings:
    log_level: str
    n_jobs: int
    output_dir: str


def get_settings() -> Settings:
    """Read settings from the environment; values from .env fill the gaps."""
    try:
        n_jobs = int(os.getenv("BERNOULLI_N_JOBS", "1"))
    except ValueError:
        n_jobs = 1
    return Settings(
        log_level=os.getenv("BERNOULLI_LOG_LEVEL", "INFO").upper(),
        n_jobs=n_jobs,
        output_dir=os.getenv("BERNOULLI_OUTPUT_DIR", "outputs"),
    )

"""Runtime configuration from environment variables."""

import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

load_dotenv(override=True)

# Project root (bundled scenarios live under it)
ROOT_DIR = Path(__file__).resolve().parent.parent
SCENARIOS_DIR = ROOT_DIR / "scenarios"

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass
class Config:
    # Output
    out_dir: str = os.getenv("OUT_DIR", "runs")
    registry_url: str = os.getenv("REGISTRY_URL", "")
    plots_enabled: bool = os.getenv("PLOTS_ENABLED", "0") == "1"

    # Reproducibility
    default_seed: int = int(os.getenv("DEFAULT_SEED", "2017"))
    paper_scale: bool = os.getenv("PAPER_SCALE", "0") == "1"

    # Parallel averages / sweep points
    max_workers: int = int(os.getenv("MAX_WORKERS", "4"))

    log_level: str = os.getenv("LOG_LEVEL", "INFO")

    def __post_init__(self):
        if self.max_workers < 1:
            raise ValueError("MAX_WORKERS must be >= 1")
        if self.default_seed < 0:
            raise ValueError("DEFAULT_SEED must be non-negative")
        self.log_level = self.log_level.upper()
        if self.log_level not in LOG_LEVELS:
            raise ValueError(f"LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}")
        if not self.registry_url:
            self.registry_url = f"sqlite:///{Path(self.out_dir) / 'registry.sqlite'}"

    def apply_overrides(self, **overrides):
        """Apply CLI flag overrides; None values leave the env setting in place."""
        for key, value in overrides.items():
            if value is None:
                continue
            if not hasattr(self, key):
                raise ValueError(f"Unknown config key: {key}")
            setattr(self, key, value)
        if "out_dir" in overrides and overrides["out_dir"] is not None and not os.getenv("REGISTRY_URL"):
            self.registry_url = f"sqlite:///{Path(self.out_dir) / 'registry.sqlite'}"
        self.__post_init__()


config = Config()

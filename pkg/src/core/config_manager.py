#!/usr/bin/env python3
"""
Configuration manager for psifrac.
Handles numerical defaults (grid, tolerances, solver settings) and their persistence.
"""

import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

CONFIG_DIR_ENV = "PSIFRAC_CONFIG_DIR"
THREADS_ENV = "PSIFRAC_THREADS"

DEFAULT_CONFIG: Dict[str, Any] = {
    # Quadrature grid
    "grid_points": 2048,
    "grid_scheme": "uniform-in-psi",
    # Residual reports
    "window_fraction": 0.02,
    "tol_legendre": 1e-9,
    "alpha_step": 1e-4,
    # Root finding
    "root_tol_x": 1e-12,
    "root_tol_f": 1e-9,
    "root_max_iter": 200,
    # Direct minimization
    "basis_size": 3,
    "max_evals": 5000,
    "simplex_scale": 0.25,
    "seed": 0,
    # Runtime
    "threads": 1,
    "log_level": "WARNING",
}


def worker_count(configured: Optional[int] = None) -> int:
    """
    Number of worker threads for per-node evaluations.

    PSIFRAC_THREADS overrides the configured value; 0 means one per CPU.
    """
    raw = os.environ.get(THREADS_ENV)
    value = configured if configured is not None else 1
    if raw is not None and raw.strip() != "":
        try:
            value = int(raw)
        except ValueError:
            logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, raw)
    if value <= 0:
        return os.cpu_count() or 1
    return value


class ConfigManager:
    """Manage psifrac numerical defaults."""

    def __init__(self, config_dir=None):
        """
        Initialize configuration manager.

        Args:
            config_dir (str): Directory holding config.json.
                              If None, uses $PSIFRAC_CONFIG_DIR or ~/.psifrac
        """
        if config_dir is None:
            env_dir = os.environ.get(CONFIG_DIR_ENV)
            self.config_dir = Path(env_dir) if env_dir else Path.home() / ".psifrac"
        else:
            self.config_dir = Path(config_dir)

        self.config_file = self.config_dir / "config.json"

        # Default configuration
        self.default_config = dict(DEFAULT_CONFIG)

        # Load or fall back to defaults
        self.config = self._load_config()

    def _load_config(self):
        """Load configuration from file, merged over the defaults."""
        if not self.config_file.exists():
            return self.default_config.copy()
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                config = json.load(f)
            if not isinstance(config, dict):
                raise ValueError("top-level JSON value is not an object")
        except (json.JSONDecodeError, IOError, ValueError) as e:
            logger.warning("Could not load config file %s: %s; using defaults", self.config_file, e)
            return self.default_config.copy()

        unknown = sorted(set(config) - set(self.default_config))
        if unknown:
            logger.warning("Ignoring unknown config keys: %s", ", ".join(unknown))
        merged = self.default_config.copy()
        merged.update({k: v for k, v in config.items() if k in self.default_config})
        return merged

    def save_config(self):
        """Save current configuration to file."""
        try:
            self.config_dir.mkdir(parents=True, exist_ok=True)
            with open(self.config_file, 'w', encoding='utf-8') as f:
                json.dump(self.config, f, indent=2)
            return True
        except IOError as e:
            logger.error("Error saving configuration: %s", e)
            return False

    def get(self, key, default=None):
        """Get configuration value."""
        return self.config.get(key, default)

    def set(self, key, value):
        """Set configuration value."""
        if key not in self.default_config:
            raise KeyError(f"unknown configuration key: {key}")
        self.config[key] = value

    def worker_count(self):
        """Threads for per-node work, honoring PSIFRAC_THREADS."""
        return worker_count(int(self.config.get("threads", 1)))

    def log_level(self):
        level = str(self.config.get("log_level", "WARNING")).upper()
        return getattr(logging, level, logging.WARNING)


def main():
    """Print the effective configuration."""
    config = ConfigManager()

    print("psifrac configuration")
    print(f"Config directory: {config.config_dir}")
    print(f"Config file: {config.config_file}")
    for key in sorted(config.config):
        print(f"  {key} = {config.config[key]}")
    print(f"Worker threads: {config.worker_count()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

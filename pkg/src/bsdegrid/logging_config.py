from __future__ import annotations

import logging
import logging.config
import os
from pathlib import Path
from typing import Any, Optional

import yaml

from bsdegrid.settings import project_root

PACKAGE_LOGGER = "bsdegrid"
LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"


def _fallback_config() -> dict[str, Any]:
    return {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {"standard": {"format": LOG_FORMAT}},
        "handlers": {
            "console": {
                "class": "logging.StreamHandler",
                "formatter": "standard",
                "stream": "ext://sys.stderr",
            }
        },
        "loggers": {PACKAGE_LOGGER: {"level": "INFO", "handlers": ["console"], "propagate": False}},
        "root": {"level": "WARNING", "handlers": ["console"]},
    }


def configure_logging(
    logging_config_path: str | Path | None = None, level: Optional[str] = None
) -> None:
    """dictConfig from YAML (configs/logging.yaml or BSDEGRID_LOGGING_CONFIG).

    `level` (or BSDEGRID_LOG_LEVEL) overrides the package logger level only. numpy
    RuntimeWarnings raised inside the schemes are routed through `py.warnings`.
    """

    candidate = logging_config_path or os.getenv("BSDEGRID_LOGGING_CONFIG", "configs/logging.yaml")
    path = Path(candidate)
    if not path.is_absolute():
        path = project_root() / path

    config: dict[str, Any] = _fallback_config()
    if path.exists():
        config = yaml.safe_load(path.read_text(encoding="utf-8")) or config
    logging.config.dictConfig(config)
    logging.captureWarnings(True)

    level = level or os.getenv("BSDEGRID_LOG_LEVEL")
    if level:
        logging.getLogger(PACKAGE_LOGGER).setLevel(level.upper())

from __future__ import annotations

import sys
from pathlib import Path

import pytest


def pytest_configure() -> None:
    repo_root = Path(__file__).resolve().parents[1]
    src = repo_root / "src"
    if str(src) not in sys.path:
        sys.path.insert(0, str(src))


@pytest.fixture
def app_config(tmp_path):
    """App config with the path-batch cache moved under tmp_path and switched off."""

    from bsdegrid.settings import CacheSection, get_config

    config = get_config()
    paths = config.paths.model_copy(update={"cache_dir": tmp_path / "cache"})
    return config.model_copy(update={"cache": CacheSection(enabled=False), "paths": paths})

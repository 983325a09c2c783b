from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import pandas as pd

from bsdegrid import __version__

# Bump when a CSV column set changes.
COLUMN_SET_VERSION = 1


def ensure_parent_dir(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def grid_report_csv_path(out_dir: Path) -> Path:
    return out_dir / "verify_grid.csv"


def ratio_report_csv_path(out_dir: Path) -> Path:
    return out_dir / "verify_grid_ratio.csv"


def grid_csv_path(out_dir: Path, steps: int) -> Path:
    return out_dir / f"grid_N{steps}.csv"


def batch_dump_path(out_dir: Path, steps: int) -> Path:
    return out_dir / f"batch_N{steps}.bin"


def solution_csv_path(out_dir: Path, steps: int) -> Path:
    return out_dir / f"solution_N{steps}.csv"


def convergence_csv_path(out_dir: Path) -> Path:
    return out_dir / "convergence.csv"


def error_report_json_path(out_dir: Path, steps: int) -> Path:
    return out_dir / f"error_report_N{steps}.json"


def summary_json_path(out_dir: Path) -> Path:
    return out_dir / "summary.json"


def smoothness_csv_path(out_dir: Path) -> Path:
    return out_dir / "smoothness.csv"


def report_csv_path(out_dir: Path) -> Path:
    return out_dir / "report.csv"


def grading_csv_path(out_dir: Path) -> Path:
    return out_dir / "grading.csv"


def _jsonable(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        # JSON has no NaN/inf; keep them as strings.
        return value if np.isfinite(value) else repr(value)
    if isinstance(value, Path):
        return str(value)
    return value


def config_hash(payload: Mapping[str, Any]) -> str:
    """sha256 of the canonical JSON of a config; the output directory is excluded."""

    data = {k: v for k, v in _jsonable(payload).items() if k != "output"}
    text = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def provenance_header(config_digest: str, seed: int, extra: Optional[Mapping[str, Any]] = None) -> dict[str, Any]:
    header: dict[str, Any] = {
        "config_hash": config_digest,
        "seed": int(seed),
        "bsdegrid_version": __version__,
        "column_set_version": COLUMN_SET_VERSION,
    }
    if extra:
        header.update(extra)
    return header


def save_csv(
    df: pd.DataFrame,
    path: Path,
    header: Optional[Mapping[str, Any]] = None,
    float_format: str = "%.17g",
) -> Path:
    """Write `# key: value` header lines, then the table."""

    ensure_parent_dir(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        for key, value in (header or {}).items():
            handle.write(f"# {key}: {value}\n")
        df.to_csv(handle, index=False, float_format=float_format, lineterminator="\n")
    return path


def load_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def read_csv_header(path: Path) -> dict[str, str]:
    header: dict[str, str] = {}
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition(": ")
            header[key] = value
    return header


def save_json(payload: Mapping[str, Any], path: Path) -> Path:
    ensure_parent_dir(path)
    text = json.dumps(_jsonable(payload), sort_keys=True, indent=2, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def load_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def save_parquet(df: pd.DataFrame, path: Path) -> Path:
    ensure_parent_dir(path)
    try:
        df.to_parquet(path, index=False)
    except ImportError as exc:
        raise RuntimeError("pyarrow is required to write Parquet files. Install requirements.txt.") from exc
    return path


def load_parquet(path: Path) -> pd.DataFrame:
    try:
        return pd.read_parquet(path)
    except ImportError as exc:
        raise RuntimeError("pyarrow is required to read Parquet files. Install requirements.txt.") from exc

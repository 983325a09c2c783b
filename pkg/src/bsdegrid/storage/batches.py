"""Binary dump of simulated path batches.

Layout (little-endian): 8-byte magic, int64 header [version, M, N, d, q, seed, first_path,
stream, start_index], float64 [T, beta], then row-major float64 arrays: grid points (N+1),
states (M, N+1, d), dW (M, N, q), tangents and inverse tangents (M, N+1, d, d).
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Optional

import numpy as np

from bsdegrid.errors import InvalidParameterError
from bsdegrid.numerics.grids import TimeGrid, make_grid
from bsdegrid.numerics.models import SdeModel
from bsdegrid.numerics.paths import PathBatch, simulate
from bsdegrid.storage.datasets import ensure_parent_dir
from bsdegrid.utils.cache import FileCache

MAGIC = b"BSDEPB01"
FORMAT_VERSION = 1
_HEADER_INTS = 9
CACHE_NAMESPACE = "path-batches"


def encode_batch(batch: PathBatch) -> bytes:
    grid = batch.grid
    d, q = batch.model.dim_d, batch.model.dim_q
    buf = io.BytesIO()
    buf.write(MAGIC)
    ints = [FORMAT_VERSION, batch.size, grid.steps, d, q, batch.seed, batch.first_path, batch.stream, batch.start_index]
    buf.write(np.asarray(ints, dtype="<i8").tobytes())
    buf.write(np.asarray([grid.horizon, grid.beta], dtype="<f8").tobytes())
    for arr in (grid.points, batch.states, batch.dW, batch.tangents, batch.inv_tangents):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_batch(data: bytes, model: SdeModel) -> PathBatch:
    if data[:8] != MAGIC:
        raise InvalidParameterError("not a path batch dump")
    offset = 8
    ints = np.frombuffer(data, dtype="<i8", count=_HEADER_INTS, offset=offset)
    offset += 8 * _HEADER_INTS
    version, M, N, d, q, seed, first_path, stream, start_index = (int(v) for v in ints)
    if version != FORMAT_VERSION:
        raise InvalidParameterError(f"unsupported batch format version {version}")
    if (d, q) != (model.dim_d, model.dim_q):
        raise InvalidParameterError(f"dump has d={d} q={q}; model has d={model.dim_d} q={model.dim_q}")
    horizon, beta = np.frombuffer(data, dtype="<f8", count=2, offset=offset)
    offset += 16

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        return arr.astype(float)

    points = take((N + 1,))
    grid = make_grid(float(horizon), N, float(beta))
    if not np.array_equal(points, grid.points):
        raise InvalidParameterError("dumped grid points do not match the rebuilt grid")
    states = take((M, N + 1, d))
    dW = take((M, N, q))
    tangents = take((M, N + 1, d, d))
    inv_tangents = take((M, N + 1, d, d))
    return PathBatch(
        grid, model, M, seed, states, dW, tangents, inv_tangents, first_path, stream, start_index
    )


def dump_batch(batch: PathBatch, path: Path) -> Path:
    ensure_parent_dir(path)
    path.write_bytes(encode_batch(batch))
    return path


def load_batch(path: Path, model: SdeModel) -> PathBatch:
    return decode_batch(path.read_bytes(), model)


def batch_cache_key(model: SdeModel, grid: TimeGrid, size: int, seed: int, stream: int = 0) -> str:
    payload = {
        "model": model.name,
        "params": model.params,
        "T": grid.horizon,
        "N": grid.steps,
        "beta": grid.beta,
        "M": size,
        "seed": seed,
        "stream": stream,
    }
    return json.dumps(payload, sort_keys=True, default=str)


def cached_simulate(
    model: SdeModel,
    grid: TimeGrid,
    size: int,
    seed: int,
    stream: int = 0,
    cache: Optional[FileCache] = None,
) -> PathBatch:
    """simulate() through the file cache; a hit returns the dumped batch unchanged."""

    if cache is None or not cache.enabled:
        return simulate(model, grid, size, seed, stream=stream)
    key = batch_cache_key(model, grid, size, seed, stream)
    data = cache.get_bytes(CACHE_NAMESPACE, key)
    if data is not None:
        return decode_batch(data, model)
    batch = simulate(model, grid, size, seed, stream=stream)
    cache.set_bytes(CACHE_NAMESPACE, key, encode_batch(batch))
    return batch

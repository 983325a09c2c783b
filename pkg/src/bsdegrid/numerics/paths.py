"""Forward path simulation with tangent processes and discrete Malliavin weights.

States follow Euler-Maruyama on the grid; constant-coefficient models reuse the same recursion
with frozen coefficients, which is exact in law and keeps tangents equal to the identity.

Brownian increments come from the counter-based streams in `bsdegrid.utils.rng`, keyed per
(step, path block). A batch can therefore be simulated in chunks of paths (`first_path`) and
reassembled bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from bsdegrid.errors import (
    IndexOutOfRangeError,
    InvalidParameterError,
    SimulationOverflowError,
    SingularTangentError,
)
from bsdegrid.numerics.grids import TimeGrid
from bsdegrid.numerics.models import SdeModel, sigma_right_inverse
from bsdegrid.utils.rng import BLOCK_SIZE, TAG_BRIDGE, block_normals, brownian_increments

logger = logging.getLogger(__name__)

Array = np.ndarray

SINGULAR_TANGENT_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class PathBatch:
    grid: TimeGrid
    model: SdeModel
    size: int
    seed: int
    states: Array = field(repr=False)  # (M, N+1, d)
    dW: Array = field(repr=False)  # (M, N, q)
    tangents: Array = field(repr=False)  # (M, N+1, d, d)
    inv_tangents: Array = field(repr=False)  # (M, N+1, d, d)
    first_path: int = 0
    stream: int = 0
    # Index from which paths are random; earlier states repeat the start state.
    start_index: int = 0

    @property
    def rng_descriptor(self) -> str:
        return (
            f"philox(seedseq[seed={self.seed}, tag=increments, stream={self.stream}, step, "
            f"block]); block={BLOCK_SIZE}; paths {self.first_path}..{self.first_path + self.size - 1}"
        )

    @property
    def path_indices(self) -> Array:
        return np.arange(self.first_path, self.first_path + self.size)

    def state(self, k: int) -> Array:
        return self.states[:, k, :]


@dataclass(frozen=True, eq=False)
class MalliavinWeightSet:
    anchor: int
    # values[j - anchor - 1] holds H^anchor_j with shape (M, q), for j = anchor+1..N.
    values: Array = field(repr=False)

    def weight(self, j: int) -> Array:
        if not (self.anchor < j <= self.anchor + self.values.shape[0]):
            raise IndexOutOfRangeError(f"weight index {j} outside ({self.anchor}, N]")
        return self.values[j - self.anchor - 1]


def _identity_stack(size: int, steps: int, d: int) -> Array:
    return np.broadcast_to(np.eye(d), (size, steps + 1, d, d))


def simulate(
    model: SdeModel,
    grid: TimeGrid,
    size: int,
    seed: int,
    *,
    first_path: int = 0,
    stream: int = 0,
    inverse_tangent: str = "direct",
    start_index: int = 0,
    start_state: Optional[Array] = None,
) -> PathBatch:
    if size < 1:
        raise InvalidParameterError("path count must be at least 1")
    if inverse_tangent not in {"direct", "flow-sde"}:
        raise InvalidParameterError(f"unknown inverse tangent method {inverse_tangent!r}")
    if not (0 <= start_index < grid.steps):
        raise IndexOutOfRangeError(f"start index {start_index} outside [0, N)")

    N = grid.steps
    d, q = model.dim_d, model.dim_q
    dW = brownian_increments(seed, grid.increments, first_path, size, q, stream=stream)
    if start_index:
        dW[:, :start_index, :] = 0.0

    x_start = model.x0 if start_state is None else np.asarray(start_state, dtype=float).reshape(d)
    states = np.empty((size, N + 1, d))
    states[:, : start_index + 1, :] = x_start

    if model.constant_coefficients:
        drift = model.drift_vector()
        sig = model.sigma_matrix()
        for k in range(start_index, N):
            states[:, k + 1, :] = states[:, k, :] + drift * grid.increments[k] + dW[:, k, :] @ sig.T
        _check_finite(states)
        eye = _identity_stack(size, N, d)
        return PathBatch(
            grid, model, size, seed, states, dW, eye, eye, first_path, stream, start_index
        )

    tangents = np.empty((size, N + 1, d, d))
    inv_tangents = np.empty((size, N + 1, d, d))
    tangents[:, : start_index + 1] = np.eye(d)
    inv_tangents[:, : start_index + 1] = np.eye(d)
    eye = np.eye(d)

    for k in range(start_index, N):
        t = float(grid.points[k])
        dt = float(grid.increments[k])
        x = states[:, k, :]
        dw = dW[:, k, :]
        sig = model.sigma(t, x)
        states[:, k + 1, :] = x + model.b(t, x) * dt + np.einsum("mdq,mq->md", sig, dw)

        grad_b = model.grad_b(t, x)
        step = eye + grad_b * dt
        grad_cols = [model.grad_sigma_col(j, t, x) for j in range(q)]
        for j in range(q):
            step = step + grad_cols[j] * dw[:, j, None, None]
        tangents[:, k + 1] = step @ tangents[:, k]

        if inverse_tangent == "direct":
            inv_tangents[:, k + 1] = _invert(tangents[:, k + 1], k + 1)
        else:
            inv_step = eye - grad_b * dt
            for j in range(q):
                inv_step = inv_step + grad_cols[j] @ grad_cols[j] * dt
                inv_step = inv_step - grad_cols[j] * dw[:, j, None, None]
            inv_tangents[:, k + 1] = inv_tangents[:, k] @ inv_step

    _check_finite(states)
    return PathBatch(
        grid, model, size, seed, states, dW, tangents, inv_tangents, first_path, stream, start_index
    )


def _check_finite(states: Array) -> None:
    if not np.all(np.isfinite(states)):
        bad = np.argwhere(~np.isfinite(states))[0]
        raise SimulationOverflowError(f"non-finite state at path {bad[0]}, step {bad[1]}")


def _invert(matrices: Array, k: int) -> Array:
    cond = np.linalg.cond(matrices)
    if not np.all(np.isfinite(cond)) or np.max(cond) > SINGULAR_TANGENT_CONDITION:
        raise SingularTangentError(f"tangent matrix numerically singular at step {k}")
    return np.linalg.inv(matrices)


def malliavin_derivative(batch: PathBatch, i: int, k: int) -> Array:
    """D_{t_i} X_{t_k} = grad X_k (grad X_i)^-1 sigma(t_i, X_i), shape (M, d, q)."""

    N = batch.grid.steps
    if not (0 <= i <= k <= N):
        raise IndexOutOfRangeError(f"need 0 <= i <= k <= N, got i={i} k={k}")
    sig_i = batch.model.sigma(float(batch.grid.points[i]), batch.states[:, i, :])
    if k == i:
        return np.array(sig_i, dtype=float)
    return batch.tangents[:, k] @ batch.inv_tangents[:, i] @ sig_i


def iter_malliavin_weights(
    batch: PathBatch, i: int, variant: str = "continuous"
) -> Iterator[tuple[int, Array]]:
    """Yield (j, H^i_j) for j = i+1..N via the running sum over k of (sigma^-1 D)^T dW_k."""

    grid = batch.grid
    N = grid.steps
    if not (0 <= i < N):
        raise IndexOutOfRangeError(f"anchor {i} outside [0, N)")
    if variant not in {"continuous", "printed"}:
        raise InvalidParameterError(f"unknown weight variant {variant!r}")
    model = batch.model
    if variant == "printed":
        if model.dim_d != model.dim_q:
            raise InvalidParameterError("printed weight variant needs d = q")
        logger.warning(
            "Using the printed discrete weight D_{t_i}X_{t_k} sigma(t_i, X_{t_i}); "
            "it differs from the continuous weight unless sigma is the identity"
        )

    sig_i = model.sigma(float(grid.points[i]), batch.states[:, i, :])
    anchor = batch.inv_tangents[:, i] @ sig_i  # (M, d, q)
    constant = model.constant_coefficients
    if constant and variant == "continuous":
        sig = model.sigma_matrix()
        projector = sigma_right_inverse(model, 0.0, model.x0[None, :])[0] @ sig  # (q, q)

    running = np.zeros((batch.size, model.dim_q))
    for k in range(i, N):
        dw = batch.dW[:, k, :]
        if constant and variant == "continuous":
            running = running + dw @ projector
        else:
            D = batch.tangents[:, k] @ anchor  # (M, d, q)
            if variant == "continuous":
                sig_inv = sigma_right_inverse(model, float(grid.points[k]), batch.states[:, k, :])
                G = sig_inv @ D  # (M, q, q)
            else:
                G = D @ sig_i
            running = running + np.einsum("mrc,mr->mc", G, dw)
        j = k + 1
        yield j, running / (grid.points[j] - grid.points[i])


def malliavin_weights(batch: PathBatch, i: int, variant: str = "continuous") -> MalliavinWeightSet:
    values = np.stack([h for _, h in iter_malliavin_weights(batch, i, variant)], axis=0)
    return MalliavinWeightSet(anchor=i, values=values)


def measure_weight_constant(batch: PathBatch, anchors: Optional[Sequence[int]] = None) -> float:
    """||sigma^-1||^2 * max E|D_{t_i} X_{t_k}|^2 over sampled anchors and later indices."""

    grid = batch.grid
    model = batch.model
    if anchors is None:
        anchors = sorted({0, grid.steps // 2, grid.steps - 1})
    inv_norm = 0.0
    d_moment = 0.0
    for k in range(grid.steps + 1):
        sig_inv = sigma_right_inverse(model, float(grid.points[k]), batch.states[:, k, :])
        inv_norm = max(inv_norm, float(np.max(np.sum(sig_inv**2, axis=(1, 2)))))
    for i in anchors:
        for k in range(i, grid.steps + 1):
            D = malliavin_derivative(batch, i, k)
            d_moment = max(d_moment, float(np.mean(np.sum(D**2, axis=(1, 2)))))
    return inv_norm * d_moment


@dataclass(frozen=True, eq=False)
class BridgeSample:
    """States at interior sub-points of one grid interval."""

    interval: int
    times: Array  # (S,)
    states: Array  # (M, S, d)
    increments: Array  # (M, S, q), W(s) - W(t_i)


def bridge_interval(
    batch: PathBatch,
    i: int,
    substeps: int,
    placement: str = "midpoint",
) -> BridgeSample:
    """Brownian-bridge sub-sampling of W inside [t_i, t_{i+1}] with the induced states.

    Midpoint placement puts sub-points at t_i + (l + 1/2) Delta_i / S. States are exact for
    constant coefficients and one Euler step from t_i otherwise.
    """

    grid = batch.grid
    if not (0 <= i < grid.steps):
        raise IndexOutOfRangeError(f"interval {i} outside [0, N)")
    if substeps < 1:
        raise InvalidParameterError("substeps must be at least 1")
    t0 = float(grid.points[i])
    dt = float(grid.increments[i])
    if placement == "midpoint":
        offsets = (np.arange(substeps) + 0.5) * dt / substeps
    elif placement == "left":
        offsets = np.arange(substeps) * dt / substeps
    else:
        raise InvalidParameterError(f"unknown placement {placement!r}")

    model = batch.model
    q = model.dim_q
    total = batch.dW[:, i, :]
    increments = np.empty((batch.size, substeps, q))
    prev_s = 0.0
    prev_w = np.zeros((batch.size, q))
    for l, s in enumerate(offsets):
        if s == prev_s:
            increments[:, l, :] = prev_w
            continue
        span = dt - prev_s
        mean = prev_w + (s - prev_s) / span * (total - prev_w)
        var = (s - prev_s) * (dt - s) / span
        z = block_normals(batch.seed, TAG_BRIDGE, (batch.stream, i, substeps, l), batch.first_path, batch.size, q)
        prev_w = mean + np.sqrt(max(var, 0.0)) * z
        prev_s = s
        increments[:, l, :] = prev_w

    x = batch.states[:, i, :]
    if model.constant_coefficients:
        drift = model.drift_vector()
        sig = model.sigma_matrix()
        states = x[:, None, :] + drift[None, None, :] * offsets[None, :, None] + increments @ sig.T
    else:
        b = model.b(t0, x)
        sig = model.sigma(t0, x)
        states = (
            x[:, None, :]
            + b[:, None, :] * offsets[None, :, None]
            + np.einsum("mdq,msq->msd", sig, increments)
        )
    return BridgeSample(i, t0 + offsets, states, increments)


def nested_paths(
    model: SdeModel,
    grid: TimeGrid,
    i: int,
    x: Array,
    size: int,
    seed: int,
    stream: int = 0,
) -> PathBatch:
    """Sub-paths started from (t_i, x); states before t_i repeat x."""

    return simulate(
        model, grid, size, seed, stream=stream, start_index=i, start_state=np.asarray(x, float)
    )


PathFunctional = Callable[[PathBatch], Array]

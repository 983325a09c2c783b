"""The explicit Euler scheme and the Malliavin-weights scheme for Markovian BSDEs.

Both schemes run backwards from Y_N = Phi(X_T). Euler takes

    Z_i = E_i[Y_{i+1} dW_i] / Delta_i
    Y_i = E_i[Y_{i+1} + f(t_i, X_i, Y_{i+1}, Z_i) Delta_i]

while the Malliavin scheme replaces Z_i by

    Z_i = E_i[Phi(X_T) H^i_N + sum_{j=i+1}^{N-1} f_j H^i_j Delta_j]

with f_j = f(t_j, X_j, Y_{j+1}, Z_j), and Y_i = E_i[Phi(X_T) + sum_{j>=i} f_j Delta_j]. Z_i is
computed before Y_i within a step because f_i needs it.

Quadrature backends work on functions (lattice tables or lazily composed closures); the
regression backend works on simulated paths.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd

from bsdegrid.errors import (
    BsdeGridError,
    InvalidParameterError,
    MissingReferenceError,
    SchemeStepError,
    UnsupportedCombinationError,
)
from bsdegrid.numerics.condexp import (
    Backend,
    CallableFunction,
    ExactProjector,
    LatticeFunction,
    LatticeProjector,
    NestedBackend,
    QuadratureBackend,
    RegressionBackend,
    StateFunction,
    StepNodes,
    gauss_hermite_rule,
    lsmc_fit,
)
from bsdegrid.numerics.grids import TimeGrid
from bsdegrid.numerics.models import Driver, SdeModel, TerminalCondition
from bsdegrid.numerics.paths import PathBatch, iter_malliavin_weights, simulate
from bsdegrid.settings import get_config

logger = logging.getLogger(__name__)

Array = np.ndarray


class VectorOfFunctions:
    """Row-vector valued state function assembled from scalar components."""

    def __init__(self, components: list[StateFunction]):
        self.components = components

    def __call__(self, x: Array) -> Array:
        return np.stack([fn(x) for fn in self.components], axis=1)

    @property
    def stderr(self) -> Optional[Array]:
        errs = [fn.stderr for fn in self.components]
        if any(e is None for e in errs):
            return None
        return np.asarray(errs, dtype=float)


class TerminalFunction(StateFunction):
    def __init__(self, terminal: TerminalCondition):
        self.terminal = terminal

    def __call__(self, x: Array) -> Array:
        return np.asarray(self.terminal(np.atleast_2d(x)), dtype=float)


@dataclass(eq=False)
class DiscreteSolution:
    grid: TimeGrid
    scheme: str
    backend: str
    model: SdeModel
    y_functions: list[Any]  # index 0..N, entry N is the terminal
    z_functions: list[Any]  # index 0..N-1, each returns (n, q)
    y_values: Optional[Array] = None  # (M, N+1) on the training batch
    z_values: Optional[Array] = None  # (M, N, q)
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def y_at(self, i: int, x: Array) -> Array:
        return np.asarray(self.y_functions[i](np.atleast_2d(x)), dtype=float)

    def z_at(self, i: int, x: Array) -> Array:
        out = np.asarray(self.z_functions[i](np.atleast_2d(x)), dtype=float)
        return out.reshape(out.shape[0], -1)

    def root(self) -> tuple[float, Array]:
        x0 = self.model.x0[None, :]
        return float(self.y_at(0, x0)[0]), self.z_at(0, x0)[0]

    @property
    def root_stderr(self) -> tuple[Optional[float], Optional[Array]]:
        recorded = self.diagnostics.get("root_stderr")
        if recorded is not None:
            return recorded
        y_err = getattr(self.y_functions[0], "stderr", None)
        z_err = getattr(self.z_functions[0], "stderr", None)
        return y_err, z_err


def _driver_at_nodes(
    driver: Driver, t: float, step: StepNodes, y_next: Array, z: Array
) -> Array:
    n, K = y_next.shape
    x_rep = step.repeat_x()
    z_rep = np.repeat(z, K, axis=0)
    return np.asarray(driver(t, x_rep, y_next.ravel(), z_rep), dtype=float).reshape(n, K)


def _wrap_step(i: int, exc: Exception) -> SchemeStepError:
    return SchemeStepError(i, exc)


_STEP_ERRORS = (BsdeGridError, np.linalg.LinAlgError, FloatingPointError, ValueError)


# --------------------------------------------------------------------------------------------
# Quadrature: lattice mode
# --------------------------------------------------------------------------------------------


def _euler_lattice(model, driver, terminal, grid, backend: QuadratureBackend) -> DiscreteSolution:
    proj = LatticeProjector(model, grid, terminal, backend.lattice)
    N = grid.steps
    y_functions: list[Any] = [None] * N + [TerminalFunction(terminal)]
    z_functions: list[Any] = [None] * N
    y_next: Optional[Array] = None
    for i in reversed(range(N)):
        try:
            step = proj.step(i)
            dt = float(grid.increments[i])
            if i == N - 1:
                yn = proj.terminal_at_nodes(step)
            else:
                yn = proj.values_at_nodes(step, y_next)
            z = step.increment(yn) / dt
            integrand = yn
            if not driver.is_zero:
                integrand = yn + _driver_at_nodes(driver, float(grid.points[i]), step, yn, z) * dt
            y = step.plain(integrand)
        except _STEP_ERRORS as exc:
            raise _wrap_step(i, exc) from exc
        y_functions[i] = LatticeFunction(proj.lattice, y)
        z_functions[i] = VectorOfFunctions(
            [LatticeFunction(proj.lattice, z[:, c]) for c in range(z.shape[1])]
        )
        y_next = y
    return DiscreteSolution(grid, "euler", "quad-lattice", model, y_functions, z_functions,
                            diagnostics={"lattice_points": proj.size})


def _malliavin_lattice(model, driver, terminal, grid, backend: QuadratureBackend) -> DiscreteSolution:
    """Malliavin scheme on the lattice through stepwise projections.

    With P, Q the plain and increment one-step projections, u the zero-driver chain and
    phi_j = E_j[f_j]:
      A_i = Q_i u_{i+1} + P_i A_{i+1}                   terminal term E_i[Phi (W_T - W_i)]
      psi_{i,j} = P_i psi_{i+1,j},   psi_{j,j} = phi_j
      C_{i,j} = Q_i psi_{i+1,j} + P_i C_{i+1,j},   C_{j,j} = 0
      Z_i = A_i / (T - t_i) + sum_{j>i} Delta_j / (t_j - t_i) C_{i,j}
    """

    proj = LatticeProjector(model, grid, terminal, backend.lattice)
    N = grid.steps
    T = grid.horizon
    t = grid.points
    L = proj.size
    q = model.dim_q
    y_functions: list[Any] = [None] * N + [TerminalFunction(terminal)]
    z_functions: list[Any] = [None] * N

    u_next: Optional[Array] = None
    a_next: Optional[Array] = None
    y_next: Optional[Array] = None
    # Columns for j = i+1..N-1 (psi) and the matching C blocks.
    psi_next = np.zeros((L, 0))
    c_next = np.zeros((L, 0, q))

    for i in reversed(range(N)):
        try:
            step = proj.step(i)
            dt = float(grid.increments[i])
            if i == N - 1:
                term = proj.terminal_at_nodes(step)
                u_i = step.plain(term)
                a_i = step.increment(term)
                yn = term
                c_i = np.zeros((L, 0, q))
                psi_i = np.zeros((L, 0))
            else:
                P, Q = proj.operators(step)
                u_i = P @ u_next
                a_i = np.stack([Q[c] @ u_next for c in range(q)], axis=1) + P @ a_next
                yn = proj.values_at_nodes(step, y_next)
                if driver.is_zero:
                    c_i = np.zeros((L, 0, q))
                    psi_i = np.zeros((L, 0))
                else:
                    psi_i = P @ psi_next
                    c_i = np.stack(
                        [Q[c] @ psi_next + P @ c_next[:, :, c] for c in range(q)], axis=2
                    )

            z = a_i / (T - t[i])
            if c_i.shape[1]:
                j = np.arange(i + 1, N)
                coef = grid.increments[j] / (t[j] - t[i])
                z = z + np.einsum("j,ljc->lc", coef, c_i)

            if driver.is_zero:
                y = step.plain(yn)
                phi_i = None
            else:
                fv = _driver_at_nodes(driver, float(t[i]), step, yn, z)
                y = step.plain(yn + fv * dt)
                phi_i = step.plain(fv)
        except _STEP_ERRORS as exc:
            raise _wrap_step(i, exc) from exc

        y_functions[i] = LatticeFunction(proj.lattice, y)
        z_functions[i] = VectorOfFunctions([LatticeFunction(proj.lattice, z[:, c]) for c in range(q)])
        u_next, a_next, y_next = u_i, a_i, y
        if phi_i is not None:
            psi_next = np.column_stack([phi_i, psi_i])
            c_next = np.concatenate([np.zeros((L, 1, q)), c_i], axis=1)

    return DiscreteSolution(grid, "malliavin", "quad-lattice", model, y_functions, z_functions,
                            diagnostics={"lattice_points": L})


# --------------------------------------------------------------------------------------------
# Quadrature: exact mode
# --------------------------------------------------------------------------------------------


class _ExactRecursion:
    """Lazily composed one-step Gauss-Hermite projections, memoized per input array."""

    def __init__(self, model, driver, terminal, grid, projector: ExactProjector):
        self.model = model
        self.driver = driver
        self.terminal = terminal
        self.grid = grid
        self.proj = projector
        self.N = grid.steps
        self._memo: dict[tuple, Array] = {}

    def _cached(self, key: tuple, x: Array, compute: Callable[[Array], Array]) -> Array:
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
        full = key + (x.shape, x.tobytes())
        hit = self._memo.get(full)
        if hit is None:
            hit = compute(x)
            self._memo[full] = hit
        return hit

    def _next(self, i: int, x: Array) -> tuple[StepNodes, int, int]:
        step = self.proj.step(i, x)
        n, K, _ = step.nodes.shape
        return step, n, K

    def _f(self, i: int, step: StepNodes, yn: Array, z: Array) -> Array:
        if self.driver.is_zero:
            return np.zeros_like(yn)
        return _driver_at_nodes(self.driver, float(self.grid.points[i]), step, yn, z)

    def y(self, i: int, x: Array) -> Array:  # pragma: no cover - overridden
        raise NotImplementedError

    def z(self, i: int, x: Array) -> Array:  # pragma: no cover - overridden
        raise NotImplementedError

    def y_next_at(self, i: int, step: StepNodes, n: int, K: int) -> Array:
        if i + 1 == self.N:
            return np.asarray(self.terminal(step.flat_nodes), dtype=float).reshape(n, K)
        return self.y(i + 1, step.flat_nodes).reshape(n, K)


class _ExactEuler(_ExactRecursion):
    def _step(self, i: int, x: Array) -> Array:
        def compute(x: Array) -> Array:
            step, n, K = self._next(i, x)
            yn = self.y_next_at(i, step, n, K)
            dt = float(self.grid.increments[i])
            z = step.increment(yn) / dt
            y = step.plain(yn + self._f(i, step, yn, z) * dt)
            return np.column_stack([y, z])

        return self._cached(("euler", i), x, compute)

    def y(self, i: int, x: Array) -> Array:
        if i == self.N:
            return np.asarray(self.terminal(np.atleast_2d(x)), dtype=float)
        return self._step(i, x)[:, 0]

    def z(self, i: int, x: Array) -> Array:
        return self._step(i, x)[:, 1:]


class _ExactMalliavin(_ExactRecursion):
    def u(self, i: int, x: Array) -> Array:
        if i == self.N:
            return np.asarray(self.terminal(np.atleast_2d(x)), dtype=float)

        def compute(x: Array) -> Array:
            step, n, K = self._next(i, x)
            return step.plain(self.u(i + 1, step.flat_nodes).reshape(n, K))

        return self._cached(("u", i), x, compute)

    def a(self, i: int, x: Array) -> Array:
        def compute(x: Array) -> Array:
            step, n, K = self._next(i, x)
            q = self.model.dim_q
            out = step.increment(self.u(i + 1, step.flat_nodes).reshape(n, K))
            if i + 1 < self.N:
                out = out + step.plain_vector(self.a(i + 1, step.flat_nodes).reshape(n, K, q))
            return out

        return self._cached(("a", i), x, compute)

    def phi(self, j: int, x: Array) -> Array:
        def compute(x: Array) -> Array:
            step, n, K = self._next(j, x)
            yn = self.y_next_at(j, step, n, K)
            return step.plain(self._f(j, step, yn, self.z(j, x)))

        return self._cached(("phi", j), x, compute)

    def psi(self, i: int, j: int, x: Array) -> Array:
        if i == j:
            return self.phi(j, x)

        def compute(x: Array) -> Array:
            step, n, K = self._next(i, x)
            return step.plain(self.psi(i + 1, j, step.flat_nodes).reshape(n, K))

        return self._cached(("psi", i, j), x, compute)

    def c(self, i: int, j: int, x: Array) -> Array:
        def compute(x: Array) -> Array:
            step, n, K = self._next(i, x)
            q = self.model.dim_q
            out = step.increment(self.psi(i + 1, j, step.flat_nodes).reshape(n, K))
            if i + 1 < j:
                out = out + step.plain_vector(self.c(i + 1, j, step.flat_nodes).reshape(n, K, q))
            return out

        return self._cached(("c", i, j), x, compute)

    def z(self, i: int, x: Array) -> Array:
        def compute(x: Array) -> Array:
            t = self.grid.points
            out = self.a(i, x) / (self.grid.horizon - t[i])
            if not self.driver.is_zero:
                for j in range(i + 1, self.N):
                    coef = float(self.grid.increments[j]) / (t[j] - t[i])
                    out = out + coef * self.c(i, j, x)
            return out

        return self._cached(("z", i), x, compute)

    def y(self, i: int, x: Array) -> Array:
        if i == self.N:
            return np.asarray(self.terminal(np.atleast_2d(x)), dtype=float)

        def compute(x: Array) -> Array:
            step, n, K = self._next(i, x)
            yn = self.y_next_at(i, step, n, K)
            dt = float(self.grid.increments[i])
            return step.plain(yn + self._f(i, step, yn, self.z(i, x)) * dt)

        return self._cached(("y", i), x, compute)


def _exact_solution(scheme: str, model, driver, terminal, grid, backend) -> DiscreteSolution:
    rule = gauss_hermite_rule(backend.order_for(terminal), model.dim_q)
    projector = ExactProjector(model, grid, rule)
    cls = _ExactEuler if scheme == "euler" else _ExactMalliavin
    rec = cls(model, driver, terminal, grid, projector)
    N = grid.steps

    def guarded(i: int, fn: Callable[[int, Array], Array]) -> Callable[[Array], Array]:
        def call(x: Array) -> Array:
            try:
                return fn(i, x)
            except _STEP_ERRORS as exc:
                raise _wrap_step(i, exc) from exc

        return call

    y_functions: list[Any] = [CallableFunction(guarded(i, rec.y)) for i in range(N)]
    y_functions.append(TerminalFunction(terminal))
    z_functions: list[Any] = [CallableFunction(guarded(i, rec.z)) for i in range(N)]
    return DiscreteSolution(grid, scheme, "quad-exact", model, y_functions, z_functions,
                            diagnostics={"order": rule.order})


# --------------------------------------------------------------------------------------------
# Regression
# --------------------------------------------------------------------------------------------


def _require_batch(batch: Optional[PathBatch], grid: TimeGrid) -> PathBatch:
    if batch is None:
        raise InvalidParameterError("the regression backend needs a path batch")
    if batch.grid.steps != grid.steps or not np.array_equal(batch.grid.points, grid.points):
        raise InvalidParameterError("path batch was simulated on a different grid")
    return batch


def _euler_regression(model, driver, terminal, grid, backend: RegressionBackend, batch) -> DiscreteSolution:
    batch = _require_batch(batch, grid)
    N = grid.steps
    M = batch.size
    q = model.dim_q
    basis = backend.basis
    y_values = np.empty((M, N + 1))
    z_values = np.empty((M, N, q))
    y_values[:, N] = terminal(batch.states[:, N, :])
    y_functions: list[Any] = [None] * N + [TerminalFunction(terminal)]
    z_functions: list[Any] = [None] * N
    # Phi(X_T) + sum_{j >= i} f_j Delta_j per path. The constant is in every basis, so the root
    # fit reproduces its mean; the fitted values themselves understate the spread.
    path_value = y_values[:, N].copy()
    root_stderr: tuple[Optional[float], Optional[Array]] = (None, None)

    for i in reversed(range(N)):
        try:
            dt = float(grid.increments[i])
            x_i = batch.states[:, i, :]
            y_next = y_values[:, i + 1]
            dw = batch.dW[:, i, :]
            z_fn = VectorOfFunctions(
                [lsmc_fit(batch, i, y_next * dw[:, c] / dt, basis) for c in range(q)]
            )
            z_i = z_fn(x_i)
            if i == 0:
                z_spread = np.std(path_value[:, None] * dw / dt, axis=0, ddof=1)
            targets = y_next
            if not driver.is_zero:
                accrual = driver(float(grid.points[i]), x_i, y_next, z_i) * dt
                targets = y_next + accrual
                path_value = path_value + accrual
            y_fn = lsmc_fit(batch, i, targets, basis)
        except _STEP_ERRORS as exc:
            raise _wrap_step(i, exc) from exc
        y_functions[i] = y_fn
        z_functions[i] = z_fn
        y_values[:, i] = y_fn(x_i)
        z_values[:, i, :] = z_i

    if M > 1:
        root_stderr = (
            float(np.std(path_value, ddof=1) / math.sqrt(M)),
            z_spread / math.sqrt(M),
        )
    return DiscreteSolution(grid, "euler", "lsmc", model, y_functions, z_functions,
                            y_values, z_values, diagnostics={"root_stderr": root_stderr})


def _malliavin_regression(
    model, driver, terminal, grid, backend: RegressionBackend, batch,
    weight_variant: str, variance_multiple: float,
) -> DiscreteSolution:
    batch = _require_batch(batch, grid)
    N = grid.steps
    M = batch.size
    q = model.dim_q
    basis = backend.basis
    y_values = np.empty((M, N + 1))
    z_values = np.empty((M, N, q))
    phi_T = np.asarray(terminal(batch.states[:, N, :]), dtype=float)
    y_values[:, N] = phi_T
    # f_j * Delta_j per path, filled as the sweep goes backwards.
    driver_terms = np.zeros((M, N))
    suffix = np.zeros(M)
    y_functions: list[Any] = [None] * N + [TerminalFunction(terminal)]
    z_functions: list[Any] = [None] * N
    variances: list[float] = []
    prev_var: Optional[float] = None

    for i in reversed(range(N)):
        try:
            x_i = batch.states[:, i, :]
            s_z = np.zeros((M, q))
            for j, weight in iter_malliavin_weights(batch, i, weight_variant):
                if j == N:
                    s_z += phi_T[:, None] * weight
                elif not driver.is_zero:
                    s_z += driver_terms[:, j, None] * weight
            var = float(np.sum(np.var(s_z, axis=0)))
            variances.append(var)
            if prev_var is not None and prev_var > 0 and var > variance_multiple * prev_var:
                logger.warning(
                    "Malliavin target variance jumped at i=%d: %.4g vs %.4g at i+1", i, var, prev_var
                )
            prev_var = var

            z_fn = VectorOfFunctions([lsmc_fit(batch, i, s_z[:, c], basis) for c in range(q)])
            z_i = z_fn(x_i)
            if not driver.is_zero:
                dt = float(grid.increments[i])
                f_i = driver(float(grid.points[i]), x_i, y_values[:, i + 1], z_i)
                driver_terms[:, i] = f_i * dt
                suffix = suffix + driver_terms[:, i]
            y_fn = lsmc_fit(batch, i, phi_T + suffix, basis)
        except _STEP_ERRORS as exc:
            raise _wrap_step(i, exc) from exc
        y_functions[i] = y_fn
        z_functions[i] = z_fn
        y_values[:, i] = y_fn(x_i)
        z_values[:, i, :] = z_i

    return DiscreteSolution(
        grid, "malliavin", "lsmc", model, y_functions, z_functions, y_values, z_values,
        diagnostics={"target_variance": variances[::-1], "weight_variant": weight_variant},
    )


# --------------------------------------------------------------------------------------------
# Public entry points
# --------------------------------------------------------------------------------------------


def _dispatch_quadrature(backend: QuadratureBackend, model: SdeModel) -> str:
    backend = backend.normalized()
    if backend.mode == "lattice" and model.dim_d != 1:
        logger.info("Lattice quadrature needs d = 1; using exact mode")
        return "exact"
    return backend.mode


def euler_scheme(
    model: SdeModel,
    driver: Driver,
    terminal: TerminalCondition,
    grid: TimeGrid,
    backend: Backend,
    batch: Optional[PathBatch] = None,
) -> DiscreteSolution:
    if isinstance(backend, QuadratureBackend):
        mode = _dispatch_quadrature(backend, model)
        if mode == "lattice":
            return _euler_lattice(model, driver, terminal, grid, backend)
        return _exact_solution("euler", model, driver, terminal, grid, backend)
    if isinstance(backend, RegressionBackend):
        return _euler_regression(model, driver, terminal, grid, backend, batch)
    if isinstance(backend, NestedBackend):
        raise UnsupportedCombinationError("nested Monte Carlo is an oracle, not a scheme backend")
    raise InvalidParameterError(f"unknown backend {backend!r}")


def malliavin_weights_scheme(
    model: SdeModel,
    driver: Driver,
    terminal: TerminalCondition,
    grid: TimeGrid,
    backend: Backend,
    batch: Optional[PathBatch] = None,
    *,
    weight_variant: Optional[str] = None,
    variance_warning_multiple: Optional[float] = None,
) -> DiscreteSolution:
    config = get_config()
    weight_variant = weight_variant or config.schemes.weight_variant
    if variance_warning_multiple is None:
        variance_warning_multiple = config.schemes.weight_variance_warning_multiple

    if isinstance(backend, QuadratureBackend):
        mode = _dispatch_quadrature(backend, model)
        if mode == "lattice":
            return _malliavin_lattice(model, driver, terminal, grid, backend)
        return _exact_solution("malliavin", model, driver, terminal, grid, backend)
    if isinstance(backend, RegressionBackend):
        return _malliavin_regression(
            model, driver, terminal, grid, backend, batch, weight_variant, variance_warning_multiple
        )
    if isinstance(backend, NestedBackend):
        raise UnsupportedCombinationError("nested Monte Carlo is an oracle, not a scheme backend")
    raise InvalidParameterError(f"unknown backend {backend!r}")


def solve(
    scheme: str,
    model: SdeModel,
    driver: Driver,
    terminal: TerminalCondition,
    grid: TimeGrid,
    backend: Backend,
    batch: Optional[PathBatch] = None,
) -> DiscreteSolution:
    if scheme == "euler":
        return euler_scheme(model, driver, terminal, grid, backend, batch)
    if scheme == "malliavin":
        return malliavin_weights_scheme(model, driver, terminal, grid, backend, batch)
    raise InvalidParameterError(f"unknown scheme {scheme!r}")


# --------------------------------------------------------------------------------------------
# Representation probe
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeResult:
    estimate: Array
    stderr: Array
    paths: int
    steps: int


def representation_probe(
    model: SdeModel,
    driver: Driver,
    terminal: TerminalCondition,
    fine_grid: TimeGrid,
    paths: int,
    seed: int,
    reference: Optional[Any] = None,
    chunk_paths: int = 16_384,
) -> ProbeResult:
    """Monte Carlo estimate of Z_0 from discrete Malliavin weights on a fine grid."""

    if not driver.is_zero and reference is None:
        raise MissingReferenceError("representation probe with a driver needs a reference (Y, Z)")
    N = fine_grid.steps
    q = model.dim_q
    total = np.zeros(q)
    total_sq = np.zeros(q)
    start = 0
    while start < paths:
        count = min(chunk_paths, paths - start)
        batch = simulate(model, fine_grid, count, seed, first_path=start)
        sample = np.zeros((count, q))
        for j, weight in iter_malliavin_weights(batch, 0):
            if j == N:
                sample += np.asarray(terminal(batch.states[:, N, :]), dtype=float)[:, None] * weight
            elif not driver.is_zero:
                t_j = float(fine_grid.points[j])
                x_j = batch.states[:, j, :]
                f_j = driver(t_j, x_j, reference.y(t_j, x_j), reference.z(t_j, x_j))
                sample += (f_j * float(fine_grid.increments[j]))[:, None] * weight
        total += sample.sum(axis=0)
        total_sq += (sample**2).sum(axis=0)
        start += count
    mean = total / paths
    var = np.maximum(total_sq / paths - mean**2, 0.0) * paths / max(paths - 1, 1)
    return ProbeResult(mean, np.sqrt(var / paths), paths, N)


def solution_to_frame(solution: DiscreteSolution, batch: Optional[PathBatch] = None) -> pd.DataFrame:
    grid = solution.grid
    x0 = solution.model.x0[None, :]
    q = solution.model.dim_q
    rows = []
    for i in range(grid.steps + 1):
        row: dict[str, Any] = {"index": i, "t": float(grid.points[i])}
        row["y_x0"] = float(solution.y_at(i, x0)[0])
        if batch is not None:
            row["mean_y"] = float(np.mean(solution.y_at(i, batch.states[:, i, :])))
        if i < grid.steps:
            z0 = solution.z_at(i, x0)[0]
            zbar = solution.z_at(i, batch.states[:, i, :]).mean(axis=0) if batch is not None else None
            for c in range(q):
                row[f"z_x0_{c}"] = float(z0[c])
                if zbar is not None:
                    row[f"mean_z_{c}"] = float(zbar[c])
        rows.append(row)
    return pd.DataFrame(rows)

"""Ground-truth references for the schemes.

- `closed_form`: Bachelier-type solutions on constant-coefficient models, with the affine
  driver a*y + b.z + c handled through an exponential factor and a Girsanov drift shift.
- `brute_force_dp`: the discrete scheme equations evaluated on the full, non-recombining
  Gauss-Hermite tree (tiny N only). Malliavin weights are exact on the tree because the
  increments are its edges.
- `feynman_kac_v`: v(t, x) = E[Phi(X_T) | X_t = x] and its gradient, used by the proxy driver.
- `fractional_smoothness_fit`: Monte Carlo estimate of the conditional-variance decay exponent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtr
from scipy.stats import norm

from bsdegrid.errors import (
    InvalidParameterError,
    ProviderUndefinedError,
    TooLargeError,
    UnsupportedCombinationError,
    UnsupportedModelError,
)
from bsdegrid.numerics.condexp import StepNodes, breakpoint_step, gauss_hermite_rule, nested_mc
from bsdegrid.numerics.grids import TimeGrid, make_grid
from bsdegrid.numerics.models import Driver, SdeModel, TerminalCondition
from bsdegrid.numerics.paths import PathBatch, simulate
from bsdegrid.settings import get_config
from bsdegrid.utils.rng import TAG_SMOOTHNESS, block_normals

if TYPE_CHECKING:
    from bsdegrid.numerics.schemes import DiscreteSolution

logger = logging.getLogger(__name__)

Array = np.ndarray

CLOSED_FORM_TERMINALS = ("identity", "constant", "call", "capped-call", "indicator")
MAX_TREE_STEPS = 8
MAX_TREE_LEAVES = 2**24


@dataclass(frozen=True, eq=False)
class ReferenceSolution:
    """(Y, Z) as functions of (t, x); z returns shape (n, q)."""

    y: Callable[[float, Array], Array]
    z: Callable[[float, Array], Array]
    horizon: float
    model_name: str
    validity: dict[str, str]
    # Exponent e with |z(t, x)| ~ (T - t)^e near the horizon.
    z_singularity_exponent: float = 0.0
    # Reference-error disclaimer for numerical references; None for closed forms.
    disclaimer: Optional[str] = None
    # (t_i, s, x) -> E[Z_s | X_{t_i} = x] when it has a closed form.
    z_conditional: Optional[Callable[[float, float, Array], Array]] = None

    @property
    def exact(self) -> bool:
        return self.disclaimer is None


# --------------------------------------------------------------------------------------------
# Closed forms
# --------------------------------------------------------------------------------------------


def _require_constant_1d(model: SdeModel, what: str) -> None:
    if not model.constant_coefficients:
        raise UnsupportedModelError(f"{what} needs a constant-coefficient model")
    if model.dim_d != 1:
        raise UnsupportedModelError(f"{what} needs a one-dimensional state")


def _call_price(m: Array, sd: float, strike: float) -> tuple[Array, Array]:
    if sd == 0.0:
        return np.maximum(m - strike, 0.0), (m > strike).astype(float)
    delta = (m - strike) / sd
    return (m - strike) * ndtr(delta) + sd * norm.pdf(delta), ndtr(delta)


def gaussian_expectation(terminal: TerminalCondition, m: Array, sd: float) -> tuple[Array, Array]:
    """E[Phi(G)] and its derivative in the mean for G ~ N(m, sd^2), by closed form."""

    m = np.asarray(m, dtype=float)
    name = terminal.name
    params = terminal.params
    if name == "identity":
        return m.copy(), np.ones_like(m)
    if name == "constant":
        return np.full_like(m, float(params["value"])), np.zeros_like(m)
    if name == "call":
        return _call_price(m, sd, float(params["strike"]))
    if name == "capped-call":
        strike = float(params["strike"])
        cap = float(params["cap"])
        lo, dlo = _call_price(m, sd, strike)
        hi, dhi = _call_price(m, sd, strike + cap)
        return lo - hi, dlo - dhi
    if name == "indicator":
        strike = float(params["strike"])
        if sd == 0.0:
            return (m >= strike).astype(float), np.zeros_like(m)
        delta = (m - strike) / sd
        return ndtr(delta), norm.pdf(delta) / sd
    raise UnsupportedCombinationError(f"no closed form for terminal {name!r}")


def _affine_parts(driver: Driver, dim_q: int) -> tuple[float, Array, float]:
    if driver.affine is None:
        raise UnsupportedCombinationError(f"no closed form for driver {driver.name!r}")
    coeffs = driver.affine
    b = np.zeros(dim_q) if not coeffs.b else np.asarray(coeffs.b, dtype=float)
    if b.shape != (dim_q,):
        raise UnsupportedCombinationError("affine z-coefficient does not match the model")
    return float(coeffs.a), b, float(coeffs.c)


def _growth(a: float, c: float, tau: float) -> tuple[float, float]:
    """Factor e^{a tau} and the constant-driver term (c/a)(e^{a tau} - 1)."""

    factor = math.exp(a * tau)
    if a == 0.0:
        return factor, c * tau
    return factor, c / a * math.expm1(a * tau)


def closed_form(model: SdeModel, terminal: TerminalCondition, driver: Driver) -> ReferenceSolution:
    if not model.constant_coefficients:
        raise UnsupportedCombinationError("closed forms need a constant-coefficient model")
    if terminal.name not in CLOSED_FORM_TERMINALS:
        raise UnsupportedCombinationError(f"no closed form for terminal {terminal.name!r}")
    if terminal.name != "identity" and model.dim_d != 1:
        raise UnsupportedCombinationError("closed forms beyond the identity need d = 1")

    a, b_z, c = _affine_parts(driver, model.dim_q)
    T = float(driver.horizon)
    sig = model.sigma_matrix()
    # Girsanov: b.z in the driver shifts the drift by sigma b.
    drift = model.drift_vector() + sig @ b_z
    row = sig[0]
    vol = float(np.linalg.norm(row))

    def moments(t: float, x: Array) -> tuple[Array, float, float]:
        tau = max(T - float(t), 0.0)
        return np.atleast_2d(x)[:, 0] + drift[0] * tau, vol * math.sqrt(tau), tau

    def y(t: float, x: Array) -> Array:
        m, sd, tau = moments(t, x)
        u, _ = gaussian_expectation(terminal, m, sd)
        factor, const = _growth(a, c, tau)
        return factor * u + const

    def z(t: float, x: Array) -> Array:
        m, sd, tau = moments(t, x)
        _, du = gaussian_expectation(terminal, m, sd)
        factor, _ = _growth(a, c, tau)
        return factor * du[:, None] * row[None, :]

    z_conditional = None
    if not np.any(b_z):

        def z_conditional(t_i: float, s: float, x: Array) -> Array:
            m, sd, _ = moments(t_i, x)
            _, du = gaussian_expectation(terminal, m, sd)
            return math.exp(a * (T - s)) * du[:, None] * row[None, :]

    exponent = (terminal.alpha - 1.0) / 2.0 if terminal.name == "indicator" else 0.0
    return ReferenceSolution(
        y=y,
        z=z,
        horizon=T,
        model_name=model.name,
        validity={"model": model.name, "terminal": terminal.name, "driver": driver.name},
        z_singularity_exponent=exponent,
        z_conditional=z_conditional,
    )


# --------------------------------------------------------------------------------------------
# Tree oracle
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TreeSolution:
    """Scheme values on every node of the quadrature tree.

    y_levels[k] and z_levels[k] have shape (n_q,) * k; the root is level 0.
    """

    scheme: str
    n_q: int
    grid: TimeGrid
    y_levels: list[Array] = field(repr=False)
    z_levels: list[Array] = field(repr=False)

    @property
    def root_y(self) -> float:
        return float(self.y_levels[0])

    @property
    def root_z(self) -> Array:
        return np.atleast_1d(np.asarray(self.z_levels[0], dtype=float))


def _reduce(values: Array, weights: Array, levels: int) -> Array:
    for _ in range(levels):
        values = values @ weights
    return values


def _expand(values: Array, levels: int) -> Array:
    return values.reshape(values.shape + (1,) * levels)


def brute_force_dp(
    model: SdeModel,
    driver: Driver,
    terminal: TerminalCondition,
    grid: TimeGrid,
    scheme: str,
    n_q: int = 8,
) -> TreeSolution:
    if scheme not in {"euler", "malliavin"}:
        raise InvalidParameterError(f"unknown scheme {scheme!r}")
    _require_constant_1d(model, "the tree oracle")
    if model.dim_q != 1:
        raise UnsupportedModelError("the tree oracle needs a scalar Brownian motion")
    N = grid.steps
    if N > MAX_TREE_STEPS or n_q < 1 or n_q**N > MAX_TREE_LEAVES:
        raise TooLargeError(f"tree with n_q={n_q} and N={N} exceeds {MAX_TREE_LEAVES} leaves")

    rule = gauss_hermite_rule(n_q, 1)
    xi = rule.nodes[:, 0]
    w = rule.weights
    drift = float(model.drift_vector()[0])
    vol = float(model.sigma_matrix()[0, 0])
    t = grid.points

    x_levels = [np.asarray(float(model.x0[0]))]
    w_levels = [np.asarray(0.0)]
    edges = []
    for k in range(N):
        dw = math.sqrt(float(grid.increments[k])) * xi
        edges.append(dw)
        w_levels.append(w_levels[k][..., None] + dw)
        x_levels.append(x_levels[k][..., None] + drift * grid.increments[k] + vol * dw)

    def f_at(k: int, y_next: Array, z_k: Array) -> Array:
        shape = y_next.shape
        x_k = np.broadcast_to(x_levels[k][..., None], shape).reshape(-1, 1)
        z_k = np.broadcast_to(z_k[..., None], shape).reshape(-1, 1)
        return np.asarray(driver(float(t[k]), x_k, y_next.reshape(-1), z_k), dtype=float).reshape(shape)

    phi = np.asarray(terminal(x_levels[N].reshape(-1, 1)), dtype=float).reshape(x_levels[N].shape)
    y_levels: list[Optional[Array]] = [None] * N + [phi]
    z_levels: list[Optional[Array]] = [None] * N

    if scheme == "euler":
        for k in reversed(range(N)):
            dt = float(grid.increments[k])
            y_next = y_levels[k + 1]
            z_k = (y_next * edges[k]) @ w / dt
            integrand = y_next if driver.is_zero else y_next + f_at(k, y_next, z_k) * dt
            y_levels[k] = integrand @ w
            z_levels[k] = z_k
        return TreeSolution(scheme, n_q, grid, y_levels, z_levels)

    # f_j lives on level j + 1: it reads Y_{j+1} at the successor node.
    f_levels: list[Optional[Array]] = [None] * N
    for i in reversed(range(N)):
        w_i = w_levels[i]
        gain = w_levels[N] - _expand(w_i, N - i)
        z_i = _reduce(phi * gain, w, N - i) / (grid.horizon - t[i])
        for j in range(i + 1, N):
            gain = w_levels[j] - _expand(w_i, j - i)
            weighted = f_levels[j] * gain[..., None]
            z_i = z_i + float(grid.increments[j]) / (t[j] - t[i]) * _reduce(weighted, w, j + 1 - i)
        z_levels[i] = z_i
        if not driver.is_zero:
            f_levels[i] = f_at(i, y_levels[i + 1], z_i)
        y_i = _reduce(phi, w, N - i)
        if not driver.is_zero:
            for j in range(i, N):
                y_i = y_i + float(grid.increments[j]) * _reduce(f_levels[j], w, j + 1 - i)
        y_levels[i] = y_i
    return TreeSolution(scheme, n_q, grid, y_levels, z_levels)


# --------------------------------------------------------------------------------------------
# Feynman-Kac value
# --------------------------------------------------------------------------------------------

VFunction = Callable[[float, Array], tuple[Array, Array]]


def feynman_kac_v(
    model: SdeModel,
    terminal: TerminalCondition,
    horizon: float = 1.0,
    legendre_order: Optional[int] = None,
    gradient: str = "likelihood-ratio",
) -> VFunction:
    """(t, x) -> (v, dv/dx) with shapes (n,) and (n, d), for t < T."""

    _require_constant_1d(model, "the Feynman-Kac value")
    if gradient not in {"likelihood-ratio", "finite-difference"}:
        raise InvalidParameterError(f"unknown gradient method {gradient!r}")
    order = legendre_order or get_config().condexp.legendre_order
    T = float(horizon)
    drift = float(model.drift_vector()[0])
    vol = model.scalar_volatility()

    def value(tau: float, x: Array) -> tuple[Array, Array, StepNodes]:
        step = breakpoint_step(model, tau, x, terminal.breakpoints, legendre_order=order)
        n, K, _ = step.nodes.shape
        phi = np.asarray(terminal(step.flat_nodes), dtype=float).reshape(n, K)
        return step.plain(phi), phi, step

    def v(t: float, x: Array) -> tuple[Array, Array]:
        if t >= T:
            raise ProviderUndefinedError(f"v(t, x) is not evaluated at t={t} >= T={T}")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tau = T - float(t)
        spread = vol * math.sqrt(tau)
        val, phi, step = value(tau, x)
        if gradient == "likelihood-ratio":
            xi = (step.nodes[:, :, 0] - (x[:, :1] + drift * tau)) / spread
            grad = np.sum(step.weights * phi * xi, axis=1) / spread
        else:
            h = 1e-5 * spread
            up, _, _ = value(tau, x + h)
            down, _, _ = value(tau, x - h)
            grad = (up - down) / (2.0 * h)
        return val, grad[:, None]

    return v


# --------------------------------------------------------------------------------------------
# Fractional smoothness
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothnessFit:
    alpha_hat: float
    stderr: float
    degenerate: bool
    curve: pd.DataFrame = field(repr=False)


def _constant_model_curve(
    model: SdeModel, terminal: TerminalCondition, times: Sequence[float], T: float, paths: int, seed: int
) -> list[tuple[float, float]]:
    v = feynman_kac_v(model, terminal, T)
    drift = float(model.drift_vector()[0])
    vol = model.scalar_volatility()
    x0 = float(model.x0[0])
    # Common random numbers across t keep the curve smooth.
    normals = block_normals(seed, TAG_SMOOTHNESS, (0,), 0, paths, 2)
    out = []
    for t in times:
        tau = T - t
        x_t = x0 + drift * t + vol * math.sqrt(t) * normals[:, 0]
        x_T = x_t + drift * tau + vol * math.sqrt(tau) * normals[:, 1]
        cond, _ = v(t, x_t[:, None])
        sq = (np.asarray(terminal(x_T[:, None]), dtype=float) - cond) ** 2
        out.append((float(np.mean(sq)), float(np.std(sq, ddof=1) / math.sqrt(paths))))
    return out


def _nested_curve(
    model: SdeModel, terminal: TerminalCondition, times: Sequence[float], T: float, paths: int, seed: int
) -> list[tuple[float, float]]:
    logger.warning("No exact inner expectation for model %s; using nested Monte Carlo", model.name)
    outer_paths = min(paths, 256)
    inner_paths = max(2, paths // outer_paths)
    grid = make_grid(T, 64, 1.0)

    def payoff(batch: PathBatch) -> Array:
        return np.asarray(terminal(batch.states[:, -1, :]), dtype=float)

    outer = simulate(model, grid, outer_paths, seed)
    terminal_values = payoff(outer)
    out = []
    for t in times:
        i = grid.index_at_or_before(t)
        sq = np.empty(outer_paths)
        for m in range(outer_paths):
            cond, _ = nested_mc(model, grid, i, outer.states[m, i, :], payoff, inner_paths, seed ^ (m + 1))
            sq[m] = (terminal_values[m] - cond) ** 2
        out.append((float(np.mean(sq)), float(np.std(sq, ddof=1) / math.sqrt(outer_paths))))
    return out


def fractional_smoothness_fit(
    model: SdeModel,
    terminal: TerminalCondition,
    t_list: Sequence[float],
    paths: int,
    seed: int,
    horizon: float = 1.0,
) -> SmoothnessFit:
    """Slope of log V_{t,T}(Phi)^2 against log(T - t), with V^2 = E|Phi(X_T) - E_t Phi(X_T)|^2."""

    from bsdegrid.numerics.metrics import NUMERICAL_FLOOR, loglog_slope

    T = float(horizon)
    times = [float(t) for t in t_list]
    if len(times) < 2:
        raise InvalidParameterError("smoothness fit needs at least two times")
    if any(not (0.0 <= t < T) for t in times):
        raise InvalidParameterError("smoothness times must lie in [0, T)")
    if paths < 2:
        raise InvalidParameterError("smoothness fit needs at least two paths")

    if model.constant_coefficients and model.dim_d == 1:
        values = _constant_model_curve(model, terminal, times, T, paths, seed)
    else:
        values = _nested_curve(model, terminal, times, T, paths, seed)

    curve = pd.DataFrame(
        {
            "t": times,
            "remaining": [T - t for t in times],
            "v2": [v for v, _ in values],
            "v2_stderr": [e for _, e in values],
        }
    )
    if np.any(curve["v2"].to_numpy() <= NUMERICAL_FLOOR):
        logger.info("Conditional variance vanishes for terminal %s; smoothness undefined", terminal.name)
        return SmoothnessFit(float("nan"), float("nan"), True, curve)
    slope, stderr, _ = loglog_slope(curve["remaining"].to_numpy(), curve["v2"].to_numpy())
    return SmoothnessFit(slope, stderr, False, curve)


# --------------------------------------------------------------------------------------------
# Numerical references
# --------------------------------------------------------------------------------------------


def reference_from_solution(solution: "DiscreteSolution", note: Optional[str] = None) -> ReferenceSolution:
    """Piecewise-constant-in-time reference from a converged fine-grid solution."""

    grid = solution.grid

    def y(t: float, x: Array) -> Array:
        if t >= grid.horizon:
            return solution.y_at(grid.steps, x)
        return solution.y_at(grid.index_at_or_before(t), x)

    def z(t: float, x: Array) -> Array:
        return solution.z_at(grid.index_at_or_before(t), x)

    disclaimer = note or (
        f"numerical reference: {solution.scheme}/{solution.backend} on N={grid.steps}, "
        f"beta={grid.beta}; its own discretization error is included in reported errors"
    )
    return ReferenceSolution(
        y=y,
        z=z,
        horizon=grid.horizon,
        model_name=solution.model.name,
        validity={"model": solution.model.name, "source": "fine-grid"},
        disclaimer=disclaimer,
    )


def reference_z_moments(
    reference: ReferenceSolution,
    model: SdeModel,
    grid: TimeGrid,
    legendre_order: Optional[int] = None,
) -> Array:
    """E|z(t_i, X_{t_i})|^2 for i < N over the exact Gaussian marginal of X."""

    _require_constant_1d(model, "marginal quadrature")
    order = legendre_order or get_config().condexp.legendre_order
    x0 = model.x0[None, :]
    out = np.empty(grid.steps)
    for i in range(grid.steps):
        t_i = float(grid.points[i])
        if t_i == 0.0:
            out[i] = float(np.sum(reference.z(0.0, x0) ** 2))
            continue
        step = breakpoint_step(model, t_i, x0, legendre_order=order)
        values = np.sum(reference.z(t_i, step.flat_nodes) ** 2, axis=1)
        out[i] = float(step.plain(values[None, :])[0])
    return out


"""Conditional-expectation backends shared by both schemes.

Three realizations of E_i[.]:

- Quadrature (constant-coefficient models only). One Gaussian step is integrated either with a
  tensor Gauss-Hermite rule (`exact` mode, compositions evaluated lazily) or with Gauss-Legendre
  pieces split at terminal breakpoints on a tabulated state lattice (`lattice` mode, d = 1).
- Least-squares regression on simulated paths (`lsmc`), polynomial or local-affine bases.
- Nested Monte Carlo from a single state, used as a spot-check oracle.

Backends are plain frozen specs; the schemes module drives the recursions.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.special import roots_hermitenorm

from bsdegrid.errors import (
    InvalidParameterError,
    RankDeficientDesignError,
    UnsupportedModelError,
)
from bsdegrid.numerics.grids import TimeGrid
from bsdegrid.numerics.models import SdeModel, TerminalCondition
from bsdegrid.numerics.paths import PathBatch, PathFunctional, nested_paths
from bsdegrid.settings import AppConfig, get_config
from bsdegrid.utils.rng import TAG_NESTED

logger = logging.getLogger(__name__)

Array = np.ndarray

# Gaussian mass beyond this many standard deviations is below double precision.
GAUSSIAN_CUTOFF = 12.0
BASE_SPLITS = (-12.0, -8.0, -6.0, -4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0)
BREAKPOINT_OFFSETS = (0.0, -0.5, 0.5, -1.0, 1.0, -2.0, 2.0, -4.0, 4.0, -8.0, 8.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------------------------
# Quadrature rules
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Tensor Gauss-Hermite rule for the standard Gaussian on R^dim."""

    order: int
    dim: int
    nodes: Array  # (K, dim)
    weights: Array  # (K,)


def gauss_hermite_rule(order: int, dim: int = 1) -> QuadratureRule:
    if order < 1:
        raise InvalidParameterError("quadrature order must be positive")
    x, w = roots_hermitenorm(order)
    w = w / math.sqrt(2.0 * math.pi)
    if dim == 1:
        return QuadratureRule(order, 1, x[:, None], w)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return QuadratureRule(order, dim, nodes, weights)


# --------------------------------------------------------------------------------------------
# State functions
# --------------------------------------------------------------------------------------------


class StateFunction:
    """A fitted or computed map x -> real on states of shape (n, d)."""

    dim: int = 1
    stderr: Optional[float] = None

    def __call__(self, x: Array) -> Array:  # pragma: no cover - interface
        raise NotImplementedError


class CallableFunction(StateFunction):
    def __init__(self, fn: Callable[[Array], Array], dim: int = 1):
        self._fn = fn
        self.dim = dim

    def __call__(self, x: Array) -> Array:
        return np.asarray(self._fn(np.atleast_2d(np.asarray(x, dtype=float))), dtype=float)


class ConstantFunction(StateFunction):
    def __init__(self, value: float, dim: int = 1, stderr: Optional[float] = None):
        self.value = float(value)
        self.dim = dim
        self.stderr = stderr

    def __call__(self, x: Array) -> Array:
        return np.full(np.atleast_2d(x).shape[0], self.value)


class LatticeFunction(StateFunction):
    """Piecewise-linear table on a sorted one-dimensional lattice, extrapolated linearly."""

    def __init__(self, lattice: Array, values: Array):
        self.lattice = lattice
        self.values = np.asarray(values, dtype=float)
        self.dim = 1

    def __call__(self, x: Array) -> Array:
        return interpolate(self.lattice, self.values, np.atleast_2d(x)[:, 0])


def interpolation_weights(lattice: Array, points: Array) -> tuple[Array, Array]:
    """Left index and fraction; fractions outside [0, 1] extrapolate the end segments."""

    idx = np.searchsorted(lattice, points, side="right") - 1
    idx = np.clip(idx, 0, lattice.size - 2)
    left = lattice[idx]
    frac = (points - left) / (lattice[idx + 1] - left)
    return idx, frac


def interpolate(lattice: Array, values: Array, points: Array) -> Array:
    idx, frac = interpolation_weights(lattice, points)
    return values[idx] * (1.0 - frac) + values[idx + 1] * frac


# --------------------------------------------------------------------------------------------
# One-step node sets
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StepNodes:
    """Quadrature of one Gaussian step from each state in x.

    nodes[n, k] is the k-th successor state of x[n], weights[n, k] its weight and dw[n, k] the
    Brownian increment leading there, so E[g(X') dW | X = x[n]] ~ sum_k w g(nodes) dw.
    """

    x: Array  # (n, d)
    nodes: Array  # (n, K, d)
    weights: Array  # (n, K)
    dw: Array  # (n, K, q)

    @property
    def flat_nodes(self) -> Array:
        n, K, d = self.nodes.shape
        return self.nodes.reshape(n * K, d)

    def repeat_x(self) -> Array:
        n, K, d = self.nodes.shape
        return np.repeat(self.x, K, axis=0)

    def plain(self, values: Array) -> Array:
        """values: (n, K) -> (n,)."""

        return np.sum(self.weights * values, axis=1)

    def plain_vector(self, values: Array) -> Array:
        """values: (n, K, c) -> (n, c)."""

        return np.einsum("nk,nkc->nc", self.weights, values)

    def increment(self, values: Array) -> Array:
        """values: (n, K) -> (n, q)."""

        return np.einsum("nk,nk,nkq->nq", self.weights, values, self.dw)


def gauss_hermite_step(model: SdeModel, tau: float, x: Array, rule: QuadratureRule) -> StepNodes:
    drift = model.drift_vector()
    sig = model.sigma_matrix()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dw = math.sqrt(tau) * rule.nodes  # (K, q)
    shift = drift * tau + dw @ sig.T  # (K, d)
    nodes = x[:, None, :] + shift[None, :, :]
    n = x.shape[0]
    weights = np.broadcast_to(rule.weights, (n, rule.weights.size))
    return StepNodes(x, nodes, weights, np.broadcast_to(dw, (n,) + dw.shape))


def breakpoint_step(
    model: SdeModel,
    tau: float,
    x: Array,
    breakpoints: Sequence[float] = (),
    local_scale: float = 0.0,
    legendre_order: int = 12,
) -> StepNodes:
    """Gauss-Legendre pieces in the Gaussian variable, split at mapped breakpoints (d = 1).

    Splits are the fixed standard-normal levels in BASE_SPLITS plus, for every breakpoint p,
    the images of p + c * sigma * local_scale for c in BREAKPOINT_OFFSETS. local_scale is the
    width over which the integrand varies near p (0 for the raw terminal).
    """

    if model.dim_d != 1:
        raise UnsupportedModelError("breakpoint quadrature needs a one-dimensional state")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    drift = float(model.drift_vector()[0])
    sig_row = model.sigma_matrix()[0]
    vol = float(np.linalg.norm(sig_row))
    spread = vol * math.sqrt(tau)
    mean = x[:, 0] + drift * tau

    extra = []
    for p in breakpoints:
        offsets = BREAKPOINT_OFFSETS if local_scale > 0 else (0.0,)
        for c in offsets:
            extra.append(p + c * vol * local_scale)
    base = np.broadcast_to(np.asarray(BASE_SPLITS), (n, len(BASE_SPLITS)))
    if extra:
        mapped = (np.asarray(extra)[None, :] - mean[:, None]) / spread
        mapped = np.clip(mapped, -GAUSSIAN_CUTOFF, GAUSSIAN_CUTOFF)
        splits = np.sort(np.concatenate([base, mapped], axis=1), axis=1)
    else:
        splits = np.array(base)

    u, wl = np.polynomial.legendre.leggauss(legendre_order)
    lo = splits[:, :-1, None]
    hi = splits[:, 1:, None]
    half = 0.5 * (hi - lo)
    xi = lo + half * (u + 1.0)  # (n, P-1, L)
    w = half * wl * _INV_SQRT_2PI * np.exp(-0.5 * xi**2)
    xi = xi.reshape(n, -1)
    w = w.reshape(n, -1)

    nodes = (mean[:, None] + spread * xi)[:, :, None]
    dw = (math.sqrt(tau) * xi)[:, :, None] * (sig_row / vol)[None, None, :]
    return StepNodes(x, nodes, w, dw)


def quad_project(
    model: SdeModel,
    grid: TimeGrid,
    i: int,
    j: int,
    g: Callable[[Array], Array],
    weight_kind: Union[str, int] = "plain",
    rule: Optional[QuadratureRule] = None,
) -> CallableFunction:
    """x -> E[g(X_{t_j}) | X_{t_i} = x], or with the Brownian increment component c as weight."""

    if not model.constant_coefficients:
        raise UnsupportedModelError("quadrature projection needs constant coefficients")
    if not (0 <= i < j <= grid.steps):
        raise InvalidParameterError(f"need 0 <= i < j <= N, got i={i} j={j}")
    if rule is None:
        rule = gauss_hermite_rule(get_config().condexp.quadrature_order, model.dim_q)
    tau = float(grid.points[j] - grid.points[i])

    def projected(x: Array) -> Array:
        step = gauss_hermite_step(model, tau, x, rule)
        n, K, d = step.nodes.shape
        values = np.asarray(g(step.flat_nodes), dtype=float).reshape(n, K)
        if weight_kind == "plain":
            return step.plain(values)
        return step.increment(values)[:, int(weight_kind)]

    return CallableFunction(projected, model.dim_d)


# --------------------------------------------------------------------------------------------
# Lattice mode
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeSpec:
    points: int = 2001
    width_sd: float = 10.0
    refine_ratio: float = 1.03
    legendre_order: int = 12
    # Smallest spacing next to a breakpoint, in units of sigma * sqrt(last step).
    min_spacing: float = 0.02

    def normalized(self) -> "LatticeSpec":
        if self.points < 3:
            raise InvalidParameterError("lattice needs at least three points")
        if self.width_sd <= 0 or self.refine_ratio <= 1.0 or self.min_spacing <= 0:
            raise InvalidParameterError("invalid lattice refinement parameters")
        if self.legendre_order < 2:
            raise InvalidParameterError("legendre order must be at least 2")
        return self


def build_lattice(
    model: SdeModel, grid: TimeGrid, terminal: TerminalCondition, spec: LatticeSpec
) -> Array:
    """Uniform lattice over the reachable range, refined geometrically around breakpoints."""

    spec = spec.normalized()
    T = grid.horizon
    x0 = float(model.x0[0])
    drift = float(model.drift_vector()[0])
    vol = model.scalar_volatility()
    lo = x0 + min(0.0, drift * T) - spec.width_sd * vol * math.sqrt(T)
    hi = x0 + max(0.0, drift * T) + spec.width_sd * vol * math.sqrt(T)
    base = np.linspace(lo, hi, spec.points)
    coarse = (hi - lo) / (spec.points - 1)
    fine = spec.min_spacing * vol * math.sqrt(float(grid.increments[-1]))

    pieces = [base]
    for p in terminal.breakpoints:
        if not (lo < p < hi):
            continue
        offsets = []
        h = fine
        total = 0.0
        while h < coarse:
            total += h
            offsets.append(total)
            h *= spec.refine_ratio
        offsets = np.asarray(offsets)
        pieces.append(np.concatenate([[p], p + offsets, p - offsets]))
    lattice = np.unique(np.concatenate(pieces))
    return lattice[(lattice >= lo) & (lattice <= hi)]


class LatticeProjector:
    """One-step expectations of lattice tables for a one-dimensional constant model."""

    def __init__(
        self,
        model: SdeModel,
        grid: TimeGrid,
        terminal: TerminalCondition,
        spec: LatticeSpec,
    ):
        if not model.constant_coefficients:
            raise UnsupportedModelError("lattice quadrature needs constant coefficients")
        if model.dim_d != 1:
            raise UnsupportedModelError("lattice quadrature needs a one-dimensional state")
        self.model = model
        self.grid = grid
        self.terminal = terminal
        self.spec = spec.normalized()
        self.lattice = build_lattice(model, grid, terminal, self.spec)
        self.x = self.lattice[:, None]

    @property
    def size(self) -> int:
        return self.lattice.size

    def step(self, i: int) -> StepNodes:
        tau = float(self.grid.increments[i])
        local = math.sqrt(float(self.grid.remaining[i + 1]))
        return breakpoint_step(
            self.model,
            tau,
            self.x,
            self.terminal.breakpoints,
            local_scale=local,
            legendre_order=self.spec.legendre_order,
        )

    def values_at_nodes(self, step: StepNodes, table: Array) -> Array:
        """Interpolated table at step nodes, shape (n, K)."""

        n, K, _ = step.nodes.shape
        return interpolate(self.lattice, table, step.nodes[:, :, 0].ravel()).reshape(n, K)

    def terminal_at_nodes(self, step: StepNodes) -> Array:
        n, K, _ = step.nodes.shape
        return np.asarray(self.terminal(step.flat_nodes), dtype=float).reshape(n, K)

    def operators(self, step: StepNodes) -> tuple[sparse.csr_matrix, list[sparse.csr_matrix]]:
        """Sparse plain and increment projection matrices acting on lattice tables."""

        n, K, _ = step.nodes.shape
        L = self.size
        idx, frac = interpolation_weights(self.lattice, step.nodes[:, :, 0].ravel())
        rows = np.repeat(np.arange(n), K)
        cols = np.concatenate([idx, idx + 1])
        rows2 = np.concatenate([rows, rows])
        w = step.weights.ravel()
        lin = np.concatenate([1.0 - frac, frac])
        plain = sparse.csr_matrix((np.concatenate([w, w]) * lin, (rows2, cols)), shape=(n, L))
        increments = []
        for c in range(step.dw.shape[2]):
            wd = w * step.dw[:, :, c].ravel()
            increments.append(
                sparse.csr_matrix((np.concatenate([wd, wd]) * lin, (rows2, cols)), shape=(n, L))
            )
        return plain, increments


class ExactProjector:
    """Gauss-Hermite step nodes from arbitrary states, memoized on the exact input bytes."""

    def __init__(self, model: SdeModel, grid: TimeGrid, rule: QuadratureRule):
        if not model.constant_coefficients:
            raise UnsupportedModelError("exact quadrature needs constant coefficients")
        self.model = model
        self.grid = grid
        self.rule = rule
        self._cache: dict[tuple[int, bytes], StepNodes] = {}

    def step(self, i: int, x: Array) -> StepNodes:
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
        key = (i, x.tobytes())
        hit = self._cache.get(key)
        if hit is None:
            hit = gauss_hermite_step(self.model, float(self.grid.increments[i]), x, self.rule)
            self._cache[key] = hit
        return hit


# --------------------------------------------------------------------------------------------
# Regression
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class RegressionBasis:
    kind: str = "polynomial"  # polynomial | local-affine
    degree: int = 3
    cells: int = 16
    # None means the numerical floor 1e-10 * trace(normal matrix) / basis size.
    ridge: Optional[float] = None
    ridge_floor: float = 1e-10

    def normalized(self) -> "RegressionBasis":
        if self.kind not in {"polynomial", "local-affine"}:
            raise InvalidParameterError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or self.cells < 1:
            raise InvalidParameterError("basis degree must be >= 0 and cells >= 1")
        if self.ridge is not None and self.ridge < 0:
            raise InvalidParameterError("ridge must be non-negative")
        return self

    def size(self, dim: int) -> int:
        if self.kind == "polynomial":
            return math.comb(self.degree + dim, dim)
        return self.cells**dim * (1 + dim)


def _monomials(degree: int, dim: int) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []
    for total in range(degree + 1):
        out.extend(itertools.combinations_with_replacement(range(dim), total))
    return out


class RegressionFunction(StateFunction):
    def __init__(
        self,
        basis: RegressionBasis,
        coef: Array,
        center: Array,
        scale: Array,
        edges: Optional[list[Array]] = None,
    ):
        self.basis = basis
        self.coef = coef
        self.center = center
        self.scale = scale
        self.edges = edges
        self.dim = center.size

    def features(self, x: Array) -> Array:
        return _features(self.basis, (np.atleast_2d(x) - self.center) / self.scale, self.edges)

    def __call__(self, x: Array) -> Array:
        return self.features(x) @ self.coef


def _features(basis: RegressionBasis, u: Array, edges: Optional[list[Array]]) -> Array:
    n, d = u.shape
    if basis.kind == "polynomial":
        cols = []
        for combo in _monomials(basis.degree, d):
            col = np.ones(n)
            for axis in combo:
                col = col * u[:, axis]
            cols.append(col)
        return np.stack(cols, axis=1)

    assert edges is not None
    cell = np.zeros(n, dtype=int)
    for axis in range(d):
        inner = edges[axis][1:-1]
        cell = cell * basis.cells + np.searchsorted(inner, u[:, axis], side="right")
    n_cells = basis.cells**d
    out = np.zeros((n, n_cells * (1 + d)))
    rows = np.arange(n)
    out[rows, cell * (1 + d)] = 1.0
    for axis in range(d):
        out[rows, cell * (1 + d) + 1 + axis] = u[:, axis]
    return out


def fit_regression(x: Array, targets: Array, basis: RegressionBasis) -> StateFunction:
    """Ridge least squares of targets on basis features of x, solved by orthogonal methods."""

    basis = basis.normalized()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    targets = np.asarray(targets, dtype=float)
    M, d = x.shape
    p = basis.size(d)
    if M < p:
        raise RankDeficientDesignError(f"{M} samples for {p} basis functions")

    spread = np.ptp(x, axis=0)
    if np.all(spread == 0):
        # Deterministic state: only the constant is identifiable.
        stderr = float(np.std(targets, ddof=1) / math.sqrt(M)) if M > 1 else 0.0
        return ConstantFunction(float(np.mean(targets)), d, stderr=stderr)

    center = x.mean(axis=0)
    scale = np.where(spread > 0, x.std(axis=0), 1.0)
    u = (x - center) / scale
    edges = None
    if basis.kind == "local-affine":
        qs = np.linspace(0.0, 1.0, basis.cells + 1)
        edges = [np.quantile(u[:, axis], qs) for axis in range(d)]
    design = _features(basis, u, edges)

    ridge = basis.ridge
    if ridge is None:
        ridge = basis.ridge_floor * float(np.sum(design**2)) / p
    if ridge == 0.0:
        coef, _, rank, _ = np.linalg.lstsq(design, targets, rcond=None)
        if rank < p:
            raise RankDeficientDesignError(f"design rank {rank} < {p} basis functions")
    else:
        augmented = np.vstack([design, math.sqrt(ridge) * np.eye(p)])
        rhs = np.concatenate([targets, np.zeros(p)])
        coef, *_ = np.linalg.lstsq(augmented, rhs, rcond=None)
    return RegressionFunction(basis, coef, center, scale, edges)


def lsmc_fit(batch: PathBatch, i: int, targets: Array, basis: RegressionBasis) -> StateFunction:
    return fit_regression(batch.states[:, i, :], targets, basis)


# --------------------------------------------------------------------------------------------
# Nested Monte Carlo
# --------------------------------------------------------------------------------------------


def nested_mc(
    model: SdeModel,
    grid: TimeGrid,
    i: int,
    x: Array,
    functional: PathFunctional,
    inner_paths: int,
    seed: int,
) -> tuple[float, float]:
    """Mean and standard error of functional(future path) over sub-paths from (t_i, x)."""

    if inner_paths < 2:
        raise InvalidParameterError("nested Monte Carlo needs at least two inner paths")
    batch = nested_paths(model, grid, i, x, inner_paths, seed, stream=TAG_NESTED)
    values = np.asarray(functional(batch), dtype=float)
    mean = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / math.sqrt(values.size))
    return mean, stderr


# --------------------------------------------------------------------------------------------
# Backend specs
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureBackend:
    mode: str = "lattice"  # lattice | exact
    order: int = 16
    indicator_order: int = 64
    lattice: LatticeSpec = field(default_factory=LatticeSpec)
    kind: str = "quad"

    def normalized(self) -> "QuadratureBackend":
        if self.mode not in {"lattice", "exact"}:
            raise InvalidParameterError(f"unknown quadrature mode {self.mode!r}")
        if self.order < 1 or self.indicator_order < 1:
            raise InvalidParameterError("quadrature order must be positive")
        self.lattice.normalized()
        return self

    def order_for(self, terminal: TerminalCondition) -> int:
        return self.indicator_order if terminal.name == "indicator" else self.order


@dataclass(frozen=True)
class RegressionBackend:
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    kind: str = "lsmc"


@dataclass(frozen=True)
class NestedBackend:
    inner_paths: int = 1000
    kind: str = "nested"


Backend = Union[QuadratureBackend, RegressionBackend, NestedBackend]


def lattice_spec_from_config(config: Optional[AppConfig] = None) -> LatticeSpec:
    config = config or get_config()
    section = config.condexp
    return LatticeSpec(
        points=section.lattice_points,
        width_sd=section.lattice_width_sd,
        refine_ratio=section.lattice_refine_ratio,
        legendre_order=section.legendre_order,
    ).normalized()


def quadrature_backend_from_config(
    config: Optional[AppConfig] = None, mode: str = "lattice", order: Optional[int] = None
) -> QuadratureBackend:
    config = config or get_config()
    return QuadratureBackend(
        mode=mode,
        order=order or config.condexp.quadrature_order,
        indicator_order=order or config.condexp.indicator_quadrature_order,
        lattice=lattice_spec_from_config(config),
    ).normalized()


def regression_backend_from_config(
    config: Optional[AppConfig] = None,
    kind: str = "polynomial",
    degree: int = 3,
    cells: int = 16,
    ridge: Optional[float] = None,
) -> RegressionBackend:
    config = config or get_config()
    basis = RegressionBasis(
        kind=kind, degree=degree, cells=cells, ridge=ridge, ridge_floor=config.condexp.ridge_floor
    ).normalized()
    return RegressionBackend(basis=basis)

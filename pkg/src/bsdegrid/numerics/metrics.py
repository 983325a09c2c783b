"""Error functionals, L2 regularity, a priori bound checks and rate fits.

The discretization error of a scheme against a reference (Y, Z) is

    E(N) = max_{i<N} E|Y_{t_i} - Ybar_i|^2 + sum_i int_{t_i}^{t_{i+1}} E|Z_t - Zbar_i|^2 dt

where the time integral is a midpoint rule over Brownian-bridge sub-points inside each
interval. Every component carries a Monte Carlo standard error.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Optional, Sequence

import numpy as np
import pandas as pd

from bsdegrid.errors import (
    DegeneratePointsError,
    InvalidParameterError,
    MissingThetaPhiError,
    ReferenceMismatchError,
)
from bsdegrid.numerics.condexp import RegressionBasis, fit_regression
from bsdegrid.numerics.grids import TimeGrid
from bsdegrid.numerics.models import SdeModel
from bsdegrid.numerics.paths import PathBatch, bridge_interval, simulate
from bsdegrid.settings import get_config

if TYPE_CHECKING:
    from bsdegrid.numerics.oracle import ReferenceSolution
    from bsdegrid.numerics.schemes import DiscreteSolution

logger = logging.getLogger(__name__)

Array = np.ndarray
BatchFactory = Callable[[int, int], PathBatch]

MAX_SUBSTEPS = 64
# Errors at or below this are treated as the numerical floor.
NUMERICAL_FLOOR = 1e-14


def _stderr(total: Array, total_sq: Array, count: int) -> Array:
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0) * count / max(count - 1, 1)
    return np.sqrt(var / count)


@dataclass
class ErrorReport:
    steps: int
    beta: float
    scheme: str
    max_y: float
    max_y_stderr: float
    sum_z: float
    sum_z_stderr: float
    total: float
    # Per grid index i < N.
    y_profile: list[float] = field(default_factory=list)
    z_profile: list[float] = field(default_factory=list)
    z_weighted_profile: list[float] = field(default_factory=list)
    y_weighted_profile: list[float] = field(default_factory=list)
    max_weighted_z_rms: float = 0.0
    substeps: int = 4
    paths: int = 0
    disclaimer: Optional[str] = None

    def to_row(self) -> dict[str, Any]:
        return {
            "N": self.steps,
            "beta": self.beta,
            "scheme": self.scheme,
            "max_y": self.max_y,
            "max_y_stderr": self.max_y_stderr,
            "sum_z": self.sum_z,
            "sum_z_stderr": self.sum_z_stderr,
            "total": self.total,
            "max_weighted_z_rms": self.max_weighted_z_rms,
            "substeps": self.substeps,
            "paths": self.paths,
        }

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class ErrorAccumulator:
    """Running sums over path chunks for one (solution, reference, substeps) pass."""

    def __init__(self, steps: int, substeps: int):
        self.steps = steps
        self.substeps = substeps
        self.count = 0
        self.y_sum = np.zeros(steps)
        self.y_sq = np.zeros(steps)
        self.z_sum = np.zeros(steps)
        self.z_sq = np.zeros(steps)
        # Per-path integrated Z error at substeps and at twice as many.
        self.int_sum = np.zeros(2)
        self.int_sq = np.zeros(2)

    def add(
        self,
        solution: "DiscreteSolution",
        reference: "ReferenceSolution",
        batch: PathBatch,
    ) -> None:
        grid = solution.grid
        N = grid.steps
        M = batch.size
        integrated = np.zeros((M, 2))
        for i in range(N):
            t_i = float(grid.points[i])
            x_i = batch.states[:, i, :]
            y_err = (reference.y(t_i, x_i) - solution.y_at(i, x_i)) ** 2
            z_bar = solution.z_at(i, x_i)
            z_err = np.sum((reference.z(t_i, x_i) - z_bar) ** 2, axis=1)
            self.y_sum[i] += y_err.sum()
            self.y_sq[i] += (y_err**2).sum()
            self.z_sum[i] += z_err.sum()
            self.z_sq[i] += (z_err**2).sum()
            dt = float(grid.increments[i])
            for slot, count in enumerate((self.substeps, 2 * self.substeps)):
                bridge = bridge_interval(batch, i, count)
                acc = np.zeros(M)
                for l in range(count):
                    z_ref = reference.z(float(bridge.times[l]), bridge.states[:, l, :])
                    acc += np.sum((z_ref - z_bar) ** 2, axis=1)
                integrated[:, slot] += dt * acc / count
        self.int_sum += integrated.sum(axis=0)
        self.int_sq += (integrated**2).sum(axis=0)
        self.count += M

    def self_check(self, tolerance: float) -> bool:
        coarse, fine = self.int_sum / self.count
        return abs(fine - coarse) <= tolerance * max(abs(fine), abs(coarse)) + NUMERICAL_FLOOR

    def report(
        self,
        solution: "DiscreteSolution",
        theta_L: float,
        disclaimer: Optional[str],
    ) -> ErrorReport:
        grid = solution.grid
        n = self.count
        y_mean = self.y_sum / n
        y_se = _stderr(self.y_sum, self.y_sq, n)
        z_mean = self.z_sum / n
        int_mean = self.int_sum / n
        int_se = _stderr(self.int_sum, self.int_sq, n)
        remaining = grid.remaining[:-1]
        z_weighted = remaining ** (1.0 + grid.beta - theta_L) * z_mean
        y_weighted = remaining ** (-(1.0 + theta_L - grid.beta)) * y_mean
        worst = int(np.argmax(y_mean))
        max_y = float(y_mean[worst])
        sum_z = float(int_mean[0])
        return ErrorReport(
            steps=grid.steps,
            beta=grid.beta,
            scheme=solution.scheme,
            max_y=max_y,
            max_y_stderr=float(y_se[worst]),
            sum_z=sum_z,
            sum_z_stderr=float(int_se[0]),
            total=max_y + sum_z,
            y_profile=y_mean.tolist(),
            z_profile=z_mean.tolist(),
            z_weighted_profile=z_weighted.tolist(),
            y_weighted_profile=y_weighted.tolist(),
            max_weighted_z_rms=float(math.sqrt(np.max(z_weighted))),
            substeps=self.substeps,
            paths=n,
            disclaimer=disclaimer,
        )


def _check_reference(solution: "DiscreteSolution", reference: "ReferenceSolution") -> None:
    if reference.model_name != solution.model.name:
        raise ReferenceMismatchError(
            f"reference built for model {reference.model_name!r}, solution uses {solution.model.name!r}"
        )
    if not math.isclose(reference.horizon, solution.grid.horizon):
        raise ReferenceMismatchError("reference and solution horizons differ")


def _check_batch(solution: "DiscreteSolution", batch: PathBatch) -> None:
    if batch.grid.steps != solution.grid.steps or not np.array_equal(
        batch.grid.points, solution.grid.points
    ):
        raise ReferenceMismatchError("evaluation batch was simulated on a different grid")


def score_batches(
    solution: "DiscreteSolution",
    reference: "ReferenceSolution",
    batch_factory: BatchFactory,
    paths: int,
    chunk_paths: Optional[int] = None,
    substeps: Optional[int] = None,
    theta_L: float = 1.0,
) -> ErrorReport:
    """Score a solution over `paths` evaluation paths produced chunk by chunk.

    Substeps double (up to MAX_SUBSTEPS) until the integrated Z error at S and 2S sub-points
    agrees within the configured relative tolerance.
    """

    config = get_config()
    _check_reference(solution, reference)
    if paths < 2:
        raise InvalidParameterError("scoring needs at least two paths")
    chunk = chunk_paths or config.harness.chunk_paths
    count = substeps or config.metrics.substeps
    if count < 1:
        raise InvalidParameterError("substeps must be at least 1")
    tolerance = config.metrics.substeps_self_check_tolerance

    while True:
        acc = ErrorAccumulator(solution.grid.steps, count)
        start = 0
        while start < paths:
            size = min(chunk, paths - start)
            batch = batch_factory(start, size)
            _check_batch(solution, batch)
            acc.add(solution, reference, batch)
            start += size
        if acc.self_check(tolerance) or count >= MAX_SUBSTEPS:
            if count >= MAX_SUBSTEPS and not acc.self_check(tolerance):
                logger.warning("Substep self-check still failing at S=%d", count)
            return acc.report(solution, theta_L, reference.disclaimer)
        logger.info("Substep self-check failed at S=%d; doubling", count)
        count *= 2


def scheme_error(
    solution: "DiscreteSolution",
    reference: "ReferenceSolution",
    batch: PathBatch,
    substeps: Optional[int] = None,
    theta_L: float = 1.0,
) -> ErrorReport:
    """Score one in-memory evaluation batch."""

    def factory(first: int, count: int) -> PathBatch:
        return batch

    return score_batches(
        solution, reference, factory, batch.size, chunk_paths=batch.size, substeps=substeps, theta_L=theta_L
    )


def batch_factory_for(
    model: SdeModel, grid: TimeGrid, seed: int, stream: int = 0
) -> BatchFactory:
    def factory(first: int, count: int) -> PathBatch:
        return simulate(model, grid, count, seed, first_path=first, stream=stream)

    return factory


# --------------------------------------------------------------------------------------------
# L2 regularity
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class L2Regularity:
    projected: float
    projected_stderr: float
    upper: float
    upper_stderr: float


def l2_regularity(
    reference: "ReferenceSolution",
    model: SdeModel,
    grid: TimeGrid,
    paths: int,
    seed: int,
    substeps: int = 8,
    basis: Optional[RegressionBasis] = None,
) -> L2Regularity:
    """sum_i int E|Z_t - Ztilde_i|^2 dt and the cruder sum_i int E|Z_t - Z_{t_i}|^2 dt.

    Ztilde_i = E_i[(1/Delta_i) int Z_s ds] comes from the reference's conditional Z when it
    has one, otherwise from regressing the within-interval path average on X_{t_i}.
    """

    if reference.model_name != model.name:
        raise ReferenceMismatchError("reference was built for a different model")
    if paths < 2:
        raise InvalidParameterError("L2 regularity needs at least two paths")
    basis = basis or RegressionBasis(degree=3, ridge_floor=get_config().condexp.ridge_floor)
    batch = simulate(model, grid, paths, seed)
    projected = np.zeros(paths)
    upper = np.zeros(paths)
    for i in range(grid.steps):
        t_i = float(grid.points[i])
        dt = float(grid.increments[i])
        x_i = batch.states[:, i, :]
        bridge = bridge_interval(batch, i, substeps)
        z_sub = np.stack(
            [reference.z(float(bridge.times[l]), bridge.states[:, l, :]) for l in range(substeps)],
            axis=1,
        )  # (M, S, q)
        z_left = reference.z(t_i, x_i)
        if reference.z_conditional is not None:
            z_tilde = np.mean(
                [reference.z_conditional(t_i, float(s), x_i) for s in bridge.times], axis=0
            )
        else:
            average = z_sub.mean(axis=1)
            z_tilde = np.stack(
                [fit_regression(x_i, average[:, c], basis)(x_i) for c in range(average.shape[1])],
                axis=1,
            )
        projected += dt * np.mean(np.sum((z_sub - z_tilde[:, None, :]) ** 2, axis=2), axis=1)
        upper += dt * np.mean(np.sum((z_sub - z_left[:, None, :]) ** 2, axis=2), axis=1)
    root = math.sqrt(paths)
    return L2Regularity(
        projected=float(projected.mean()),
        projected_stderr=float(projected.std(ddof=1) / root),
        upper=float(upper.mean()),
        upper_stderr=float(upper.std(ddof=1) / root),
    )


# --------------------------------------------------------------------------------------------
# A priori Z bound
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class AprioriCheck:
    max_weighted: float
    exponent: float
    profile: pd.DataFrame = field(repr=False)


def apriori_z_check(
    z_second_moments: Sequence[float],
    grid: TimeGrid,
    theta_c: float,
    theta_phi: Optional[float],
) -> AprioriCheck:
    """w_i = (E|Z_{t_i}|^2)^(1/2) (T - t_i)^(-((2 theta_c ^ theta_phi) - 1)/2)."""

    if theta_phi is None:
        raise MissingThetaPhiError("a priori check needs theta_phi (or alpha in its place)")
    moments = np.asarray(z_second_moments, dtype=float)
    if moments.shape != (grid.steps,):
        raise InvalidParameterError(f"expected {grid.steps} second moments, got {moments.shape}")
    exponent = (min(2.0 * theta_c, theta_phi) - 1.0) / 2.0
    rms = np.sqrt(np.maximum(moments, 0.0))
    weighted = rms * grid.remaining[:-1] ** (-exponent)
    profile = pd.DataFrame(
        {"index": np.arange(grid.steps), "t": grid.points[:-1], "rms": rms, "weighted": weighted}
    )
    return AprioriCheck(float(np.max(weighted)), exponent, profile)


# --------------------------------------------------------------------------------------------
# Rate fits
# --------------------------------------------------------------------------------------------


def _ols(log_x: Array, log_y: Array) -> tuple[float, float, float, float]:
    design = np.column_stack([np.ones_like(log_x), log_x])
    coef, *_ = np.linalg.lstsq(design, log_y, rcond=None)
    intercept, slope = float(coef[0]), float(coef[1])
    resid = log_y - design @ coef
    n = log_x.size
    centered = log_x - log_x.mean()
    sxx = float(centered @ centered)
    if n > 2 and sxx > 0:
        stderr = math.sqrt(float(resid @ resid) / (n - 2) / sxx)
    else:
        stderr = float("nan")
    sst = float(((log_y - log_y.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 1.0
    return slope, intercept, stderr, r2


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Slope, slope standard error and R^2 of log y on log x."""

    slope, _, stderr, r2 = _ols(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)))
    return slope, stderr, r2


@dataclass(frozen=True)
class RateFit:
    points: list[tuple[int, float]]
    slope: float
    intercept: float
    slope_stderr: float
    r2: float
    # N values the primary fit used.
    used: list[int]
    slope_all: float
    intercept_all: float
    slope_stderr_all: float
    r2_all: float
    dropped_smallest: bool = False
    degenerate_floor: bool = False

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["points"] = [[int(n), float(e)] for n, e in self.points]
        return out


def fit_rate(
    points: Sequence[tuple[int, float]],
    drop_smallest: Optional[bool] = None,
    floor: float = NUMERICAL_FLOOR,
) -> RateFit:
    pts = sorted((int(n), float(e)) for n, e in points)
    if len(pts) < 3:
        raise DegeneratePointsError(f"rate fit needs at least 3 points, got {len(pts)}")
    ns = [n for n, _ in pts]
    if len(set(ns)) != len(ns):
        raise DegeneratePointsError("rate fit needs distinct N values")
    errors = np.asarray([e for _, e in pts])
    if np.all(np.abs(errors) <= floor):
        logger.info("All errors at the numerical floor; rate is undefined")
        nan = float("nan")
        return RateFit(pts, nan, nan, nan, nan, ns, nan, nan, nan, nan, False, True)
    if np.any(errors <= 0) or not np.all(np.isfinite(errors)):
        raise DegeneratePointsError("rate fit needs positive finite errors")
    if drop_smallest is None:
        drop_smallest = get_config().metrics.drop_smallest_n

    log_n = np.log(np.asarray(ns, dtype=float))
    log_e = np.log(errors)
    all_fit = _ols(log_n, log_e)
    if drop_smallest and len(pts) >= 4:
        primary = _ols(log_n[1:], log_e[1:])
        used = ns[1:]
        dropped = True
    else:
        primary = all_fit
        used = ns
        dropped = False
    return RateFit(
        points=pts,
        slope=primary[0],
        intercept=primary[1],
        slope_stderr=primary[2],
        r2=primary[3],
        used=used,
        slope_all=all_fit[0],
        intercept_all=all_fit[1],
        slope_stderr_all=all_fit[2],
        r2_all=all_fit[3],
        dropped_smallest=dropped,
        degenerate_floor=False,
    )

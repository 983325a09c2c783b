"""Graded time grids on [0, T] and the bound checks they come with.

The grid with parameter beta in (0, 1] places t_i = T - T(1 - i/N)^(1/beta), so steps shrink
towards the horizon where the control process Z can blow up. beta = 1 is the uniform grid.

Bound checks return `BoundCheck` records instead of asserting, so the harness can write the
margins into its reports.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import pandas as pd
from scipy.special import betaln

from bsdegrid.errors import IndexOutOfRangeError, InvalidParameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Immutable beta-graded partition t_0 = 0 < ... < t_N = T."""

    horizon: float
    steps: int
    beta: float
    points: np.ndarray = field(repr=False)
    increments: np.ndarray = field(repr=False)
    # T - t_i, kept separately so it is exact near the horizon.
    remaining: np.ndarray = field(repr=False)

    @property
    def is_uniform(self) -> bool:
        return self.beta == 1.0

    def index_at_or_before(self, t: float) -> int:
        """Largest i < N with t_i <= t (clamped to [0, N-1])."""

        idx = int(np.searchsorted(self.points, t, side="right")) - 1
        return min(max(idx, 0), self.steps - 1)

    def to_frame(self) -> pd.DataFrame:
        delta = np.append(self.increments, np.nan)
        return pd.DataFrame(
            {"index": np.arange(self.steps + 1), "t": self.points, "delta": delta}
        )


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool
    # lhs / rhs when the comparison was made on a rescaled form; the margin follows it.
    ratio: Optional[float] = None

    @property
    def margin(self) -> float:
        if self.ratio is not None:
            return self.rhs * (1.0 - self.ratio)
        return self.rhs - self.lhs


def _readonly(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


def make_grid(horizon: float, steps: int, beta: float) -> TimeGrid:
    if not (isinstance(horizon, (int, float)) and math.isfinite(horizon) and horizon > 0):
        raise InvalidParameterError(f"horizon must be a positive finite number, got {horizon!r}")
    if isinstance(steps, bool) or int(steps) != steps or steps < 1:
        raise InvalidParameterError(f"steps must be a positive integer, got {steps!r}")
    if not (0.0 < beta <= 1.0):
        raise InvalidParameterError(f"beta must lie in (0, 1], got {beta!r}")

    T = float(horizon)
    N = int(steps)
    beta = float(beta)
    index = np.arange(N + 1, dtype=float)

    if beta == 1.0:
        points = T * index / N
        remaining = T * (N - index) / N
        increments = np.full(N, T / N)
    else:
        with np.errstate(divide="ignore"):
            fraction = np.exp(np.log1p(-index / N) / beta)
        remaining = T * fraction
        points = T - remaining
        points[0] = 0.0
        # t_N is assigned, never evaluated.
        points[N] = T
        remaining[N] = 0.0
        increments = np.diff(points)

    return TimeGrid(
        horizon=T,
        steps=N,
        beta=beta,
        points=_readonly(points),
        increments=_readonly(increments),
        remaining=_readonly(remaining),
    )


def _check_theta(theta: float) -> None:
    if not (0.0 < theta <= 1.0):
        raise InvalidParameterError(f"theta must lie in (0, 1], got {theta!r}")


def grid_theta_bound(grid: TimeGrid, theta: float) -> float:
    """max_k Delta_k / (T - t_k)^(1 - theta) over k < N."""

    _check_theta(theta)
    ratios = grid.increments / grid.remaining[:-1] ** (1.0 - theta)
    return float(np.max(ratios))


def theta_bound_constant(grid: TimeGrid, theta: float) -> float:
    """(T^theta / beta) * N^-(1 ^ theta/beta)."""

    exponent = min(1.0, theta / grid.beta)
    return grid.horizon**theta / grid.beta / grid.steps**exponent


def check_theta_bound(grid: TimeGrid, theta: float) -> BoundCheck:
    """Compare the theta-ratio against its bound with zero tolerance.

    The decision is taken on the integer-step form: with j = N - k steps left,
    Delta_k / (T - t_k)^(1 - theta) = T^theta N^(-theta/beta) g(j) where
    g(j) = (j^(1/beta) - (j - 1)^(1/beta)) j^((theta - 1)/beta). Dividing the bound by the common
    factors leaves beta * N^(e - theta/beta) * max g <= 1, which compares tight uniform cases
    exactly instead of through two independently rounded sides.
    """

    _check_theta(theta)
    lhs = grid_theta_bound(grid, theta)
    rhs = theta_bound_constant(grid, theta)

    beta = grid.beta
    N = grid.steps
    j = np.arange(1, N + 1, dtype=float)
    inv_beta = 1.0 / beta
    g = (j**inv_beta - (j - 1.0) ** inv_beta) * j ** ((theta - 1.0) * inv_beta)
    exponent = min(1.0, theta / beta)
    normalized = beta * float(N) ** (exponent - theta * inv_beta) * float(np.max(g))
    return BoundCheck(lhs=lhs, rhs=rhs, holds=bool(normalized <= 1.0), ratio=normalized)


def grid_ratio_bound(grid: TimeGrid) -> float:
    """max_{k <= N-2} Delta_k / Delta_{k+1}."""

    if grid.steps < 2:
        raise InvalidParameterError("grid ratio bound needs at least two steps")
    inc = grid.increments
    return float(np.max(inc[:-1] / inc[1:]))


def ratio_bound_constant(beta: float) -> float:
    return (1.0 / beta) * max(1.0, (1.0 / (2.0 * beta)) ** (1.0 / beta - 1.0))


def check_ratio_bound(grid: TimeGrid) -> BoundCheck:
    """Measured step ratio against the literal constant.

    The last ratio is always 2^(1/beta) - 1, which exceeds the constant for a band of beta
    below 1 at every N; such rows are reported, not raised.
    """

    lhs = grid_ratio_bound(grid)
    rhs = ratio_bound_constant(grid.beta)
    holds = bool(lhs <= rhs)
    if not holds:
        logger.warning(
            "Step-ratio bound exceeded: beta=%s N=%s ratio=%.6g constant=%.6g",
            grid.beta,
            grid.steps,
            lhs,
            rhs,
        )
    return BoundCheck(lhs=lhs, rhs=rhs, holds=holds)


def _check_exponent(name: str, value: float) -> None:
    if not (0.0 < value <= 1.0):
        raise InvalidParameterError(f"{name} must lie in (0, 1], got {value!r}")


def beta_constant(delta: float, rho: float) -> float:
    """B(delta, rho) = Gamma(delta) Gamma(rho) / Gamma(delta + rho), via log-Gamma."""

    _check_exponent("delta", delta)
    _check_exponent("rho", rho)
    return float(np.exp(betaln(delta, rho)))


def continuous_kernel_integral(delta: float, rho: float, t: float, s: float) -> float:
    """Integral over (t, s) of (s - r)^(delta-1) (r - t)^(rho-1) dr."""

    if not s > t:
        raise InvalidParameterError("continuous kernel integral needs s > t")
    return beta_constant(delta, rho) * (s - t) ** (delta + rho - 1.0)


def check_discrete_kernel_bound(
    grid: TimeGrid, delta: float, rho: float, i: int, k: int
) -> BoundCheck:
    _check_exponent("delta", delta)
    _check_exponent("rho", rho)
    if not (0 <= i < k <= grid.steps):
        raise IndexOutOfRangeError(f"need 0 <= i < k <= N, got i={i} k={k} N={grid.steps}")

    t = grid.points
    j = np.arange(i + 1, k)
    if j.size == 0:
        lhs = 0.0
    else:
        lhs = float(
            np.sum((t[k] - t[j]) ** (delta - 1.0) * (t[j] - t[i]) ** (rho - 1.0) * grid.increments[j])
        )
    rhs = 2.0 * continuous_kernel_integral(delta, rho, t[i], t[k])
    return BoundCheck(lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs))


def sweep_theta_bounds(
    betas: Iterable[float], thetas: Iterable[float], steps: Iterable[int], horizon: float = 1.0
) -> pd.DataFrame:
    rows = []
    thetas = list(thetas)
    steps = list(steps)
    for beta in betas:
        for n in steps:
            grid = make_grid(horizon, n, beta)
            for theta in thetas:
                check = check_theta_bound(grid, theta)
                rows.append(
                    {
                        "beta": float(beta),
                        "theta": float(theta),
                        "N": int(n),
                        "lhs": check.lhs,
                        "rhs": check.rhs,
                        "margin": check.margin,
                        "holds": check.holds,
                    }
                )
    return pd.DataFrame(rows, columns=["beta", "theta", "N", "lhs", "rhs", "margin", "holds"])


def sweep_ratio_bounds(
    betas: Iterable[float], steps: Iterable[int], horizon: float = 1.0
) -> pd.DataFrame:
    rows = []
    steps = [n for n in steps if n >= 2]
    for beta in betas:
        for n in steps:
            check = check_ratio_bound(make_grid(horizon, n, beta))
            rows.append(
                {
                    "beta": float(beta),
                    "N": int(n),
                    "lhs": check.lhs,
                    "rhs": check.rhs,
                    "margin": check.margin,
                    "holds": check.holds,
                }
            )
    return pd.DataFrame(rows, columns=["beta", "N", "lhs", "rhs", "margin", "holds"])

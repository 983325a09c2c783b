from __future__ import annotations

import math

import numpy as np
import pytest

from bsdegrid.errors import IndexOutOfRangeError, InvalidParameterError
from bsdegrid.numerics.grids import (
    beta_constant,
    check_discrete_kernel_bound,
    check_ratio_bound,
    check_theta_bound,
    continuous_kernel_integral,
    make_grid,
    sweep_ratio_bounds,
    sweep_theta_bounds,
)


def test_uniform_grid_points() -> None:
    grid = make_grid(1.0, 4, 1.0)
    assert grid.is_uniform
    assert grid.points.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert np.allclose(grid.increments, 0.25)
    assert grid.remaining.tolist() == [1.0, 0.75, 0.5, 0.25, 0.0]


def test_graded_grid_refines_towards_horizon() -> None:
    grid = make_grid(1.0, 4, 0.5)
    assert np.allclose(grid.points, [0.0, 0.4375, 0.75, 0.9375, 1.0])
    assert grid.points[0] == 0.0
    assert grid.points[-1] == 1.0
    assert np.all(np.diff(grid.increments) < 0)


def test_grid_arrays_are_read_only() -> None:
    grid = make_grid(2.0, 8, 0.7)
    with pytest.raises(ValueError):
        grid.points[1] = 0.0


@pytest.mark.parametrize(
    "horizon, steps, beta",
    [(0.0, 4, 1.0), (math.inf, 4, 1.0), (1.0, 0, 1.0), (1.0, 2.5, 1.0), (1.0, 4, 0.0), (1.0, 4, 1.5)],
)
def test_make_grid_rejects_bad_parameters(horizon: float, steps: int, beta: float) -> None:
    with pytest.raises(InvalidParameterError):
        make_grid(horizon, steps, beta)


def test_index_at_or_before_is_clamped() -> None:
    grid = make_grid(1.0, 4, 1.0)
    assert grid.index_at_or_before(0.3) == 1
    assert grid.index_at_or_before(0.5) == 2
    assert grid.index_at_or_before(-1.0) == 0
    assert grid.index_at_or_before(1.0) == 3


def test_uniform_theta_one_bound_is_tight_but_holds() -> None:
    check = check_theta_bound(make_grid(1.0, 64, 1.0), 1.0)
    assert check.lhs == pytest.approx(1 / 64)
    assert check.rhs == pytest.approx(1 / 64)
    assert check.holds


@pytest.mark.parametrize("beta", [0.2, 0.5, 0.8, 1.0])
@pytest.mark.parametrize("theta", [0.25, 0.5, 1.0])
def test_theta_bound_holds_across_table(beta: float, theta: float) -> None:
    for steps in (4, 16, 256):
        assert check_theta_bound(make_grid(1.0, steps, beta), theta).holds


def test_theta_margin_sign_agrees_with_verdict() -> None:
    table = sweep_theta_bounds([0.2, 0.4, 0.6, 0.8, 1.0], [0.25, 0.5, 0.75, 1.0], [4, 16, 64, 256])
    assert (table["holds"] == (table["margin"] >= 0.0)).all()
    tight = check_theta_bound(make_grid(1.0, 64, 1.0), 1.0)
    assert tight.margin >= 0.0
    assert tight.margin == pytest.approx(tight.rhs - tight.lhs, abs=1e-15)


def test_theta_must_lie_in_unit_interval() -> None:
    with pytest.raises(InvalidParameterError):
        check_theta_bound(make_grid(1.0, 4, 1.0), 0.0)


def test_ratio_bound_last_ratio_exceeds_constant_for_mid_beta() -> None:
    check = check_ratio_bound(make_grid(1.0, 8, 0.5))
    assert check.lhs == pytest.approx(3.0)
    assert check.rhs == pytest.approx(2.0)
    assert not check.holds


def test_ratio_bound_uniform_grid() -> None:
    check = check_ratio_bound(make_grid(1.0, 8, 1.0))
    assert check.lhs == pytest.approx(1.0)
    assert check.holds


def test_beta_constant_values() -> None:
    assert beta_constant(1.0, 1.0) == pytest.approx(1.0)
    assert beta_constant(0.5, 0.5) == pytest.approx(math.pi)
    with pytest.raises(InvalidParameterError):
        beta_constant(0.0, 0.5)


def test_discrete_kernel_bound_and_index_checks() -> None:
    grid = make_grid(1.0, 32, 0.6)
    assert check_discrete_kernel_bound(grid, 0.5, 0.5, 0, 32).holds
    assert check_discrete_kernel_bound(grid, 1.0, 1.0, 3, 4).lhs == 0.0
    with pytest.raises(IndexOutOfRangeError):
        check_discrete_kernel_bound(grid, 0.5, 0.5, 4, 4)


def test_sweeps_cover_the_table() -> None:
    theta = sweep_theta_bounds([0.5, 1.0], [0.5, 1.0], [4, 8, 16])
    assert len(theta) == 12
    assert bool(theta["holds"].all())
    ratio = sweep_ratio_bounds([0.5, 1.0], [1, 4, 8])
    assert len(ratio) == 4
    assert list(ratio.columns) == ["beta", "N", "lhs", "rhs", "margin", "holds"]


def test_continuous_kernel_integral() -> None:
    assert continuous_kernel_integral(1.0, 1.0, 0.2, 0.7) == pytest.approx(0.5)
    assert continuous_kernel_integral(0.5, 0.5, 0.0, 0.3) == pytest.approx(math.pi)
    with pytest.raises(InvalidParameterError):
        continuous_kernel_integral(0.5, 0.5, 0.4, 0.4)

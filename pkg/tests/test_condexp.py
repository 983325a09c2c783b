from __future__ import annotations

import math

import numpy as np
import pytest

from bsdegrid.errors import InvalidParameterError, RankDeficientDesignError, UnsupportedModelError
from bsdegrid.numerics.condexp import (
    ConstantFunction,
    ExactProjector,
    LatticeProjector,
    LatticeSpec,
    RegressionBasis,
    breakpoint_step,
    build_lattice,
    fit_regression,
    gauss_hermite_rule,
    lsmc_fit,
    nested_mc,
    quad_project,
    quadrature_backend_from_config,
    regression_backend_from_config,
)
from bsdegrid.numerics.grids import make_grid
from bsdegrid.numerics.paths import simulate
from bsdegrid.numerics.models import capped_call_terminal, indicator_terminal, standard_brownian, tanh_model


def test_gauss_hermite_rule_moments() -> None:
    rule = gauss_hermite_rule(6)
    x = rule.nodes[:, 0]
    assert rule.weights.sum() == pytest.approx(1.0)
    assert np.sum(rule.weights * x**2) == pytest.approx(1.0)
    assert np.sum(rule.weights * x**4) == pytest.approx(3.0)
    assert gauss_hermite_rule(3, dim=2).nodes.shape == (9, 2)
    with pytest.raises(InvalidParameterError):
        gauss_hermite_rule(0)


def test_breakpoint_step_integrates_indicator_exactly() -> None:
    model = standard_brownian()
    tau = 0.5
    step = breakpoint_step(model, tau, np.zeros((1, 1)), breakpoints=(0.0,))
    above = (step.nodes[:, :, 0] >= 0.0).astype(float)
    assert step.plain(above)[0] == pytest.approx(0.5, abs=1e-12)
    assert step.increment(above)[0, 0] == pytest.approx(math.sqrt(tau) / math.sqrt(2 * math.pi), abs=1e-12)
    assert step.plain(step.nodes[:, :, 0] ** 2)[0] == pytest.approx(tau)


def test_breakpoint_step_needs_scalar_state() -> None:
    from bsdegrid.numerics.models import constant_model

    model = constant_model([0.0, 0.0], [0.0, 0.0], np.eye(2))
    with pytest.raises(UnsupportedModelError):
        breakpoint_step(model, 0.1, np.zeros((1, 2)))


def test_quad_project_moments() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 4, 1.0)
    x = np.array([[0.0], [1.5]])
    second = quad_project(model, grid, 1, 3, lambda v: v[:, 0] ** 2)
    assert np.allclose(second(x), x[:, 0] ** 2 + 0.5)
    weighted = quad_project(model, grid, 1, 3, lambda v: v[:, 0], weight_kind=0)
    assert np.allclose(weighted(x), 0.5)
    with pytest.raises(UnsupportedModelError):
        quad_project(tanh_model(), grid, 1, 3, lambda v: v[:, 0])


def test_lattice_refined_at_breakpoints() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 16, 0.5)
    lattice = build_lattice(model, grid, capped_call_terminal(), LatticeSpec(points=201))
    assert 0.0 in lattice
    assert 1.0 in lattice
    assert np.all(np.diff(lattice) > 0)
    spacing_near = np.min(np.abs(lattice[lattice != 0.0]))
    assert spacing_near < (lattice[-1] - lattice[0]) / 200


def test_lattice_operators_preserve_linear_tables() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 8, 1.0)
    projector = LatticeProjector(model, grid, indicator_terminal(), LatticeSpec(points=101))
    step = projector.step(3)
    plain, increments = projector.operators(step)
    table = projector.lattice
    assert np.allclose(plain @ table, table, atol=1e-8)
    # E[(x + dW) dW] = tau
    assert np.allclose(increments[0] @ table, grid.increments[3], atol=1e-8)
    assert np.allclose(step.plain(projector.values_at_nodes(step, table)), plain @ table)
    with pytest.raises(UnsupportedModelError):
        LatticeProjector(tanh_model(), grid, indicator_terminal(), LatticeSpec())


def test_exact_projector_memoizes_steps() -> None:
    model = standard_brownian()
    projector = ExactProjector(model, make_grid(1.0, 4, 1.0), gauss_hermite_rule(5))
    x = np.array([[0.1], [0.2]])
    assert projector.step(1, x) is projector.step(1, x.copy())
    assert projector.step(2, x) is not projector.step(1, x)


def test_polynomial_regression_recovers_quadratic() -> None:
    x = np.linspace(-2.0, 2.0, 50)[:, None]
    y = 1.0 + 2.0 * x[:, 0] + 3.0 * x[:, 0] ** 2
    fitted = fit_regression(x, y, RegressionBasis(degree=2, ridge=0.0))
    probe = np.array([[-1.0], [0.5], [1.7]])
    assert np.allclose(fitted(probe), 1.0 + 2.0 * probe[:, 0] + 3.0 * probe[:, 0] ** 2)


def test_local_affine_regression_fits_piecewise_linear() -> None:
    x = np.linspace(-1.0, 1.0, 400)[:, None]
    y = np.abs(x[:, 0])
    fitted = fit_regression(x, y, RegressionBasis(kind="local-affine", cells=4, ridge=0.0))
    assert np.allclose(fitted(np.array([[-0.7], [0.8]])), [0.7, 0.8], atol=1e-8)


def test_regression_edge_cases() -> None:
    with pytest.raises(RankDeficientDesignError):
        fit_regression(np.zeros((3, 1)) + np.arange(3)[:, None], np.zeros(3), RegressionBasis(degree=3))
    const = fit_regression(np.ones((10, 1)), np.arange(10.0), RegressionBasis(degree=2))
    assert isinstance(const, ConstantFunction)
    assert const(np.zeros((2, 1))).tolist() == [4.5, 4.5]
    assert const.stderr > 0
    with pytest.raises(InvalidParameterError):
        fit_regression(np.zeros((5, 1)), np.zeros(5), RegressionBasis(kind="spline"))


def test_nested_mc_mean_of_terminal_state() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 4, 1.0)
    mean, stderr = nested_mc(model, grid, 1, np.array([0.3]), lambda b: b.states[:, -1, 0], 4000, seed=2)
    assert stderr == pytest.approx(math.sqrt(0.75 / 4000), rel=0.1)
    assert abs(mean - 0.3) < 4 * stderr


def test_backends_from_config() -> None:
    quad = quadrature_backend_from_config(mode="exact", order=10)
    assert quad.order_for(indicator_terminal()) == 10
    default = quadrature_backend_from_config()
    assert default.order_for(indicator_terminal()) == 64
    assert default.order_for(capped_call_terminal()) == 16
    assert regression_backend_from_config(degree=4).basis.degree == 4
    with pytest.raises(InvalidParameterError):
        quadrature_backend_from_config(mode="adaptive")


def test_lsmc_fit_regresses_on_time_i_states() -> None:
    batch = simulate(standard_brownian(), make_grid(1.0, 4, 1.0), 400, seed=9)
    x2 = batch.states[:, 2, 0]
    fitted = lsmc_fit(batch, 2, 0.5 + x2**2, RegressionBasis(degree=2, ridge=0.0))
    probe = np.array([[0.0], [1.0]])
    assert np.allclose(fitted(probe), [0.5, 1.5])

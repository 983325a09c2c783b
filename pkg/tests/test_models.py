from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from bsdegrid.errors import IllConditionedVolatilityError, InvalidParameterError, MissingThetaPhiError
from bsdegrid.numerics.models import (
    RateInputs,
    SpotCheckSpec,
    affine_driver,
    capped_call_terminal,
    constant_model,
    cut_driver,
    indicator_terminal,
    predicted_rate,
    pseudo_inverse,
    quadratic_truncated_driver,
    spot_check_driver,
    spot_check_ellipticity,
    standard_brownian,
    synthetic_driver,
    tanh_model,
    truncate,
)


def test_standard_brownian_shapes() -> None:
    model = standard_brownian(x0=0.5, sigma=2.0)
    assert (model.dim_d, model.dim_q) == (1, 1)
    assert model.constant_coefficients
    assert model.scalar_volatility() == pytest.approx(2.0)
    assert model.sigma(0.0, np.zeros((3, 1))).shape == (3, 1, 1)
    assert model.x0.tolist() == [0.5]


def test_constant_model_needs_q_at_least_d() -> None:
    with pytest.raises(InvalidParameterError):
        constant_model(0.0, 0.0, [[1.0], [1.0]])


def test_tanh_model_requires_ellipticity() -> None:
    with pytest.raises(InvalidParameterError):
        tanh_model(s0=0.3, s1=0.5)
    model = tanh_model()
    assert model.ellipticity_lb == pytest.approx(0.7**2)
    report = spot_check_ellipticity(model, SpotCheckSpec(samples=200))
    assert report.passed


def test_pseudo_inverse_rejects_singular_volatility() -> None:
    with pytest.raises(IllConditionedVolatilityError):
        pseudo_inverse(np.array([[1.0, 0.0], [1.0, 0.0]]))
    sigma = np.array([[1.0, 0.0, 1.0], [0.0, 2.0, 0.0]])
    assert np.allclose(sigma @ pseudo_inverse(sigma), np.eye(2))


def test_terminal_conditions() -> None:
    x = np.array([[-1.0], [0.0], [0.5], [2.0]])
    capped = capped_call_terminal(strike=0.0, cap=1.0)
    assert capped(x).tolist() == [0.0, 0.0, 0.5, 1.0]
    assert capped.bounded
    assert capped.breakpoints == (0.0, 1.0)
    ind = indicator_terminal(0.0)
    assert ind(x).tolist() == [0.0, 1.0, 1.0, 1.0]
    assert ind.alpha == 0.5
    assert ind.theta_phi is None


def test_truncate_and_cut_driver() -> None:
    assert truncate(np.array([-3.0, 0.2, 5.0]), 1.0).tolist() == [-1.0, 0.2, 1.0]
    driver = cut_driver(affine_driver(a=0.0, c=2.0), 0.25)
    x = np.zeros((2, 1))
    y = np.zeros(2)
    z = np.zeros((2, 1))
    assert driver(0.5, x, y, z).tolist() == [2.0, 2.0]
    assert driver(0.8, x, y, z).tolist() == [0.0, 0.0]
    assert driver.affine is None
    with pytest.raises(InvalidParameterError):
        cut_driver(driver, 1.5)


def test_spot_checks_accept_declared_constants() -> None:
    model = standard_brownian()
    spec = SpotCheckSpec(samples=200)
    assert spot_check_driver(affine_driver(a=0.5, b=0.3, c=0.1), model, spec, seed=3).passed
    assert spot_check_driver(synthetic_driver(), model, spec, seed=4).passed


def test_spot_check_flags_understated_lipschitz_constant() -> None:
    model = standard_brownian()
    driver = affine_driver(a=2.0)
    understated = replace(driver, L_f=0.1)
    report = spot_check_driver(understated, model, SpotCheckSpec(samples=100), seed=1)
    assert not report.passed
    assert report.worst_ratio > 1.0


def test_spot_check_batches_samples_by_time_level() -> None:
    # f = a y: the Lipschitz ratio is |a| / L_f * (T - t)^((1 - theta_L) / 2) <= 1 on every sample,
    # and the single-level run evaluates all samples in one call.
    model = standard_brownian()
    driver = affine_driver(a=0.5)
    one_level = spot_check_driver(driver, model, SpotCheckSpec(samples=500, time_levels=1), seed=2)
    many_levels = spot_check_driver(driver, model, SpotCheckSpec(samples=500, time_levels=64), seed=2)
    assert one_level.samples == many_levels.samples == 500
    assert one_level.passed and many_levels.passed
    assert 0.0 < many_levels.worst_ratio <= 1.0
    with pytest.raises(InvalidParameterError):
        SpotCheckSpec(time_levels=0).normalized()


def test_predicted_rate_euler_lipschitz_terminal() -> None:
    pred = predicted_rate("euler", RateInputs(alpha=1.0, theta_L=1.0, theta_c=1.0, beta=0.9))
    assert pred.gamma == pytest.approx(1.0)
    assert pred.exponent == pytest.approx(1.0)
    assert pred.grid_constraint_ok


def test_predicted_rate_euler_indicator_needs_graded_grid() -> None:
    uniform = predicted_rate("euler", RateInputs(alpha=0.5, theta_L=1.0, theta_c=1.0, beta=1.0))
    graded = predicted_rate("euler", RateInputs(alpha=0.5, theta_L=1.0, theta_c=1.0, beta=0.4))
    assert uniform.gamma == pytest.approx(0.75)
    assert not uniform.grid_constraint_ok
    assert graded.grid_constraint_ok
    assert graded.exponent == pytest.approx(1.0)


def test_predicted_rate_malliavin_and_missing_theta_phi() -> None:
    pred = predicted_rate("malliavin", RateInputs(alpha=1.0, theta_L=1.0, theta_c=1.0, beta=0.5))
    assert pred.exponent == pytest.approx(0.5)
    assert pred.log_factor
    with pytest.raises(MissingThetaPhiError):
        predicted_rate("euler-holder", RateInputs(alpha=1.0, theta_L=1.0, theta_c=1.0, beta=0.5))
    with pytest.raises(InvalidParameterError):
        predicted_rate("crank-nicolson", RateInputs(alpha=1.0, theta_L=1.0, theta_c=1.0, beta=0.5))


def test_quadratic_driver_clamps_z() -> None:
    driver = quadratic_truncated_driver(c=1.0, C_u=1.0, theta=0.5)
    assert driver.theta_L == 0.5
    # Clamp level at t = 0.75 is 0.25^(-1/4) = sqrt(2).
    value = driver(0.75, np.zeros((1, 1)), np.array([-1.0]), np.array([[3.0]]))
    assert value[0] == pytest.approx(4.0)
    small = driver(0.75, np.zeros((1, 1)), np.array([0.0]), np.array([[0.5]]))
    assert small[0] == pytest.approx(1.25)
    with pytest.raises(InvalidParameterError):
        quadratic_truncated_driver(c=0.0, C_u=1.0, theta=0.5)

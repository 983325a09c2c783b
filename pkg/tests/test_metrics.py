from __future__ import annotations

import math

import numpy as np
import pytest

from bsdegrid.errors import DegeneratePointsError, InvalidParameterError, MissingThetaPhiError, ReferenceMismatchError
from bsdegrid.numerics.condexp import LatticeSpec, QuadratureBackend
from bsdegrid.numerics.grids import make_grid
from bsdegrid.numerics.metrics import (
    apriori_z_check,
    batch_factory_for,
    fit_rate,
    l2_regularity,
    loglog_slope,
    score_batches,
    scheme_error,
)
from bsdegrid.numerics.models import (
    affine_driver,
    capped_call_terminal,
    constant_model,
    identity_terminal,
    indicator_terminal,
    standard_brownian,
    zero_driver,
)
from bsdegrid.numerics.oracle import closed_form, reference_z_moments
from bsdegrid.numerics.paths import simulate
from bsdegrid.numerics.schemes import euler_scheme

LATTICE = QuadratureBackend(mode="lattice", lattice=LatticeSpec(points=401))


def test_exact_solution_scores_at_the_floor() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 8, 0.5)
    solution = euler_scheme(model, zero_driver(), identity_terminal(), grid, LATTICE)
    reference = closed_form(model, identity_terminal(), zero_driver())
    report = scheme_error(solution, reference, simulate(model, grid, 500, seed=1, stream=1))
    assert report.total < 1e-14
    assert report.paths == 500
    assert report.substeps == 4
    assert len(report.z_profile) == 8
    assert report.to_row()["N"] == 8


def test_capped_call_error_decreases_with_steps() -> None:
    model = standard_brownian()
    terminal = capped_call_terminal()
    reference = closed_form(model, terminal, zero_driver())
    totals = []
    for steps in (4, 16):
        grid = make_grid(1.0, steps, 0.9)
        solution = euler_scheme(model, zero_driver(), terminal, grid, QuadratureBackend(mode="lattice"))
        factory = batch_factory_for(model, grid, seed=7, stream=1)
        report = score_batches(solution, reference, factory, 2000, chunk_paths=700)
        assert report.paths == 2000
        totals.append(report.total)
    assert totals[1] < totals[0]


def test_chunking_does_not_change_scores() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 4, 1.0)
    terminal = indicator_terminal()
    solution = euler_scheme(model, zero_driver(), terminal, grid, LATTICE)
    reference = closed_form(model, terminal, zero_driver())
    factory = batch_factory_for(model, grid, seed=2, stream=1)
    whole = score_batches(solution, reference, factory, 300, chunk_paths=300, substeps=64)
    parts = score_batches(solution, reference, factory, 300, chunk_paths=128, substeps=64)
    assert parts.max_y == pytest.approx(whole.max_y, rel=1e-10)
    assert parts.sum_z == pytest.approx(whole.sum_z, rel=1e-10)


def test_reference_mismatches_are_rejected() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 4, 1.0)
    solution = euler_scheme(model, zero_driver(), identity_terminal(), grid, LATTICE)
    other_model = closed_form(constant_model(0.0, 0.0, 1.0), identity_terminal(), zero_driver())
    with pytest.raises(ReferenceMismatchError):
        scheme_error(solution, other_model, simulate(model, grid, 10, seed=1))
    reference = closed_form(model, identity_terminal(), zero_driver())
    with pytest.raises(ReferenceMismatchError):
        scheme_error(solution, reference, simulate(model, make_grid(1.0, 4, 0.5), 10, seed=1))


def test_l2_regularity_for_martingale_z() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 4, 1.0)
    # Zero driver: Z is a martingale, so projecting on the left point loses nothing.
    ref = closed_form(model, indicator_terminal(), zero_driver())
    reg = l2_regularity(ref, model, grid, 500, seed=4)
    assert reg.projected == pytest.approx(reg.upper)
    assert reg.upper > 0


def test_l2_regularity_for_deterministic_z() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 4, 1.0)
    ref = closed_form(model, identity_terminal(), affine_driver(a=1.0))
    reg = l2_regularity(ref, model, grid, 50, seed=4)
    assert reg.projected < reg.upper
    assert reg.projected_stderr == pytest.approx(0.0, abs=1e-12)


def test_apriori_indicator_profile() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 16, 1.0)
    ref = closed_form(model, indicator_terminal(), zero_driver())
    moments = reference_z_moments(ref, model, grid)
    check = apriori_z_check(moments, grid, theta_c=1.0, theta_phi=0.5)
    assert check.exponent == pytest.approx(-0.25)
    t = check.profile["t"].to_numpy()
    expected = (2.0 * math.pi) ** -0.5 * (1.0 + t) ** -0.25
    assert np.allclose(check.profile["weighted"], expected, rtol=1e-4)
    assert check.max_weighted == pytest.approx((2.0 * math.pi) ** -0.5, rel=1e-4)


def test_apriori_check_needs_theta_phi_and_matching_length() -> None:
    grid = make_grid(1.0, 4, 1.0)
    with pytest.raises(MissingThetaPhiError):
        apriori_z_check([1.0] * 4, grid, theta_c=1.0, theta_phi=None)
    with pytest.raises(InvalidParameterError):
        apriori_z_check([1.0] * 3, grid, theta_c=1.0, theta_phi=1.0)


def test_loglog_slope_of_power_law() -> None:
    slope, stderr, r2 = loglog_slope([1.0, 2.0, 4.0, 8.0], [5.0, 5.0 * 2**0.5, 10.0, 5.0 * 8**0.5])
    assert slope == pytest.approx(0.5)
    assert stderr == pytest.approx(0.0, abs=1e-12)
    assert r2 == pytest.approx(1.0)


def test_fit_rate_drops_smallest_n() -> None:
    points = [(8, 3.0 / 8), (16, 3.0 / 16), (32, 3.0 / 32), (4, 5.0)]
    fit = fit_rate(points, drop_smallest=True)
    assert fit.dropped_smallest
    assert fit.used == [8, 16, 32]
    assert fit.slope == pytest.approx(-1.0)
    assert fit.slope_all < -1.0
    kept = fit_rate(points, drop_smallest=False)
    assert kept.used == [4, 8, 16, 32]
    assert kept.slope == pytest.approx(kept.slope_all)
    assert fit.to_dict()["points"][0] == [4, 5.0]


def test_fit_rate_three_points_never_drop() -> None:
    fit = fit_rate([(8, 1.0), (16, 0.5), (32, 0.25)], drop_smallest=True)
    assert not fit.dropped_smallest
    assert fit.slope == pytest.approx(-1.0)


def test_fit_rate_degenerate_inputs() -> None:
    with pytest.raises(DegeneratePointsError):
        fit_rate([(8, 1.0), (16, 0.5)])
    with pytest.raises(DegeneratePointsError):
        fit_rate([(8, 1.0), (8, 0.5), (16, 0.2)])
    with pytest.raises(DegeneratePointsError):
        fit_rate([(8, 1.0), (16, 0.0), (32, 0.2)])
    with pytest.raises(DegeneratePointsError):
        fit_rate([(8, 1.0), (16, float("inf")), (32, 0.2)])
    floor = fit_rate([(8, 0.0), (16, 1e-16), (32, 0.0)])
    assert floor.degenerate_floor
    assert math.isnan(floor.slope)

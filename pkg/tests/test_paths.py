from __future__ import annotations

import numpy as np
import pytest

from bsdegrid.errors import IndexOutOfRangeError, InvalidParameterError
from bsdegrid.numerics.grids import make_grid
from bsdegrid.numerics.models import standard_brownian, tanh_model
from bsdegrid.numerics.paths import (
    bridge_interval,
    iter_malliavin_weights,
    malliavin_weights,
    measure_weight_constant,
    nested_paths,
    simulate,
)


def test_batches_extend_without_perturbing_prefix() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 8, 0.6)
    small = simulate(model, grid, 10, seed=42)
    large = simulate(model, grid, 20, seed=42)
    assert np.array_equal(small.states, large.states[:10])
    assert np.array_equal(small.dW, large.dW[:10])


def test_chunked_simulation_reassembles_exactly() -> None:
    model = tanh_model()
    grid = make_grid(1.0, 6, 0.8)
    full = simulate(model, grid, 12, seed=9)
    tail = simulate(model, grid, 7, seed=9, first_path=5)
    assert np.array_equal(full.states[5:], tail.states)
    assert np.array_equal(full.tangents[5:], tail.tangents)


def test_streams_and_seeds_are_independent() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 4, 1.0)
    base = simulate(model, grid, 5, seed=1)
    assert not np.array_equal(base.dW, simulate(model, grid, 5, seed=1, stream=1).dW)
    assert not np.array_equal(base.dW, simulate(model, grid, 5, seed=2).dW)


def test_increment_variance_matches_step() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 4, 0.5)
    batch = simulate(model, grid, 20_000, seed=3)
    second_moment = np.mean(batch.dW[:, 0, 0] ** 2)
    assert second_moment == pytest.approx(grid.increments[0], rel=0.05)
    assert np.allclose(np.diff(batch.states[:, :, 0], axis=1), batch.dW[:, :, 0])


def test_tangent_inverse_is_inverse() -> None:
    batch = simulate(tanh_model(), make_grid(1.0, 5, 1.0), 50, seed=4)
    product = batch.tangents @ batch.inv_tangents
    assert np.allclose(product, np.eye(1))
    flow = simulate(tanh_model(), make_grid(1.0, 5, 1.0), 50, seed=4, inverse_tangent="flow-sde")
    assert np.allclose(flow.states, batch.states)


def test_simulate_rejects_bad_arguments() -> None:
    model = standard_brownian()
    grid = make_grid(1.0, 4, 1.0)
    with pytest.raises(InvalidParameterError):
        simulate(model, grid, 0, seed=1)
    with pytest.raises(IndexOutOfRangeError):
        simulate(model, grid, 3, seed=1, start_index=4)


def test_brownian_weights_are_scaled_increments() -> None:
    grid = make_grid(1.0, 6, 0.7)
    batch = simulate(standard_brownian(), grid, 100, seed=5)
    W = np.concatenate([np.zeros((100, 1, 1)), np.cumsum(batch.dW, axis=1)], axis=1)
    for j, h in iter_malliavin_weights(batch, 2):
        expected = (W[:, j, :] - W[:, 2, :]) / (grid.points[j] - grid.points[2])
        assert np.allclose(h, expected)
    weights = malliavin_weights(batch, 2)
    assert weights.values.shape == (4, 100, 1)
    with pytest.raises(IndexOutOfRangeError):
        weights.weight(2)


def test_printed_weight_matches_continuous_for_unit_volatility() -> None:
    batch = simulate(standard_brownian(), make_grid(1.0, 4, 1.0), 30, seed=6)
    cont = malliavin_weights(batch, 0).values
    printed = malliavin_weights(batch, 0, variant="printed").values
    assert np.allclose(cont, printed)


def test_weight_constant_for_standard_brownian() -> None:
    batch = simulate(standard_brownian(), make_grid(1.0, 4, 1.0), 10, seed=7)
    assert measure_weight_constant(batch) == pytest.approx(1.0)


def test_bridge_interval_midpoints_and_states() -> None:
    grid = make_grid(1.0, 4, 1.0)
    batch = simulate(standard_brownian(x0=1.0), grid, 2000, seed=8)
    sample = bridge_interval(batch, 1, 4)
    assert np.allclose(sample.times, 0.25 + (np.arange(4) + 0.5) * 0.0625)
    assert sample.states.shape == (2000, 4, 1)
    assert np.allclose(sample.states, batch.states[:, 1:2, :] + sample.increments)
    # Bridge variance at s is s (dt - s) / dt.
    s = 0.5 * 0.0625
    var = np.var(sample.increments[:, 0, 0] - s / 0.25 * batch.dW[:, 1, 0])
    assert var == pytest.approx(s * (0.25 - s) / 0.25, rel=0.1)
    with pytest.raises(InvalidParameterError):
        bridge_interval(batch, 1, 4, placement="right")


def test_nested_paths_start_from_given_state() -> None:
    grid = make_grid(1.0, 4, 1.0)
    sub = nested_paths(standard_brownian(), grid, 2, np.array([0.3]), 8, seed=9)
    assert np.all(sub.states[:, :3, 0] == 0.3)
    assert np.all(sub.dW[:, :2, :] == 0.0)

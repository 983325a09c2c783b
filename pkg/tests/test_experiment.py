from __future__ import annotations

import numpy as np
import pytest

from bsdegrid.errors import ConfigError, MissingReferenceError
from bsdegrid.harness.catalog import (
    build_backend,
    build_components,
    build_driver,
    build_model,
    build_reference,
    closed_form_or_none,
)
from bsdegrid.harness.experiment import BackendSpec, ComponentSpec, load_experiment, parse_experiment
from bsdegrid.numerics.condexp import NestedBackend, QuadratureBackend, RegressionBackend
from bsdegrid.numerics.models import (
    indicator_terminal,
    standard_brownian,
    synthetic_driver,
    tanh_model,
    zero_driver,
)
from bsdegrid.settings import project_root

ORIGIN = np.zeros((1, 1))


def test_minimal_experiment_uses_defaults() -> None:
    exp = parse_experiment("seed: 3\n")
    assert exp.seed == 3
    assert exp.scheme == "euler"
    assert exp.model.name == "standard-brownian"
    assert exp.training_paths == exp.paths
    assert not exp.acceptance.has_slope_band


def test_validation_errors_name_field_and_line() -> None:
    with pytest.raises(ConfigError) as info:
        parse_experiment("seed: 1\ngrid:\n  beta: 1.5\n", "exp.yaml")
    assert "exp.yaml:3: grid.beta" in str(info.value)


def test_missing_seed_is_an_error() -> None:
    with pytest.raises(ConfigError) as info:
        parse_experiment("name: no-seed\n")
    assert "seed" in str(info.value)


def test_unknown_keys_and_components_are_rejected() -> None:
    with pytest.raises(ConfigError) as info:
        parse_experiment("seed: 1\ngrid:\n  bta: 0.5\n")
    assert "grid.bta" in str(info.value)
    with pytest.raises(ConfigError) as info:
        parse_experiment("seed: 1\nterminal:\n  name: digital\n")
    assert "unknown terminal" in str(info.value)


def test_steps_must_increase() -> None:
    with pytest.raises(ConfigError):
        parse_experiment("seed: 1\ngrid:\n  steps: [8, 8, 16]\n")


def test_yaml_syntax_error_reports_position() -> None:
    with pytest.raises(ConfigError) as info:
        parse_experiment("seed: [1, 2\n", "broken.yaml")
    assert "broken.yaml:" in str(info.value)


def test_missing_file(tmp_path) -> None:
    with pytest.raises(ConfigError):
        load_experiment(tmp_path / "nope.yaml")


def test_shipped_experiments_parse() -> None:
    configs = sorted((project_root() / "configs" / "experiments").glob("*.yaml"))
    assert configs
    for path in configs:
        exp = load_experiment(path)
        build_components(exp)


def test_catalog_builds_components() -> None:
    exp = parse_experiment(
        "seed: 1\n"
        "model: {name: standard-brownian, params: {sigma: 2.0}}\n"
        "driver: {name: affine, params: {a: 0.5, cut: 0.1}}\n"
        "terminal: {name: capped-call, params: {strike: 0.0, cap: 1.0}}\n"
    )
    model, terminal, driver = build_components(exp)
    assert model.scalar_volatility() == 2.0
    assert terminal.bound == 1.0
    assert driver.params["cut"] == 0.1
    y = np.ones(1)
    z = np.zeros((1, 1))
    assert driver(0.5, ORIGIN, y, z)[0] == 0.5
    assert driver(0.95, ORIGIN, y, z)[0] == 0.0


def test_catalog_rejects_bad_parameters() -> None:
    with pytest.raises(ConfigError):
        build_model(ComponentSpec(name="tanh", params={"volatility": 1.0}))
    with pytest.raises(ConfigError):
        build_model(ComponentSpec(name="geometric"))


def test_proxy_driver_shifts_by_value() -> None:
    model = standard_brownian()
    terminal = indicator_terminal()
    spec = ComponentSpec(name="proxy", params={"base": {"name": "affine", "params": {"a": 1.0}}})
    driver = build_driver(spec, model, terminal, 1.0)
    assert driver.name == "proxy(affine)"
    assert driver(0.0, ORIGIN, np.zeros(1), np.zeros((1, 1)))[0] == pytest.approx(0.5, abs=1e-6)


def test_build_backend_kinds() -> None:
    assert isinstance(build_backend(BackendSpec(kind="quad", mode="exact", order=8)), QuadratureBackend)
    lsmc = build_backend(BackendSpec(kind="lsmc", basis="local-affine", cells=8))
    assert isinstance(lsmc, RegressionBackend)
    assert lsmc.basis.cells == 8
    assert isinstance(build_backend(BackendSpec(kind="nested", inner_paths=50)), NestedBackend)


def test_build_reference_kinds() -> None:
    closed = parse_experiment("seed: 1\nterminal: {name: indicator}\n")
    ref = build_reference(closed, *build_components(closed))
    assert ref is not None and ref.exact

    none = parse_experiment("seed: 1\nreference: {kind: none}\n")
    assert build_reference(none, *build_components(none)) is None

    fine = parse_experiment(
        "seed: 1\n"
        "reference: {kind: fine-grid, steps: 4, beta: 1.0, backend: {kind: quad, mode: exact, order: 4}}\n"
    )
    ref = build_reference(fine, *build_components(fine))
    assert ref is not None and not ref.exact
    assert ref.z(0.0, ORIGIN)[0, 0] == pytest.approx(1.0)


def test_closed_form_or_none() -> None:
    model = standard_brownian()
    assert closed_form_or_none(model, indicator_terminal(), synthetic_driver()) is None
    assert closed_form_or_none(tanh_model(), indicator_terminal(), zero_driver()) is None
    assert closed_form_or_none(model, indicator_terminal(), zero_driver()) is not None


def test_closed_form_reference_without_formula_is_missing() -> None:
    exp = parse_experiment("seed: 1\ndriver: {name: synthetic}\n")
    with pytest.raises(MissingReferenceError, match="fine-grid"):
        build_reference(exp, *build_components(exp))

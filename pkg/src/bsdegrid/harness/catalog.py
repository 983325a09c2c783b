"""Named components an experiment config can refer to."""

from __future__ import annotations

import logging
from typing import Any, Callable, Optional

from bsdegrid.errors import (
    ConfigError,
    MissingReferenceError,
    UnsupportedCombinationError,
    UnsupportedModelError,
)
from bsdegrid.harness.experiment import BackendSpec, ComponentSpec, ExperimentConfig
from bsdegrid.numerics import models
from bsdegrid.numerics.condexp import (
    Backend,
    NestedBackend,
    quadrature_backend_from_config,
    regression_backend_from_config,
)
from bsdegrid.numerics.grids import make_grid
from bsdegrid.numerics.models import Driver, SdeModel, TerminalCondition
from bsdegrid.numerics.oracle import ReferenceSolution, closed_form, feynman_kac_v, reference_from_solution
from bsdegrid.settings import AppConfig, get_config
from bsdegrid.utils.rng import derive_seed

logger = logging.getLogger(__name__)

MODELS: dict[str, Callable[..., SdeModel]] = {
    "standard-brownian": models.standard_brownian,
    "brownian": models.constant_model,
    "tanh": models.tanh_model,
}

TERMINALS: dict[str, Callable[..., TerminalCondition]] = {
    "identity": models.identity_terminal,
    "constant": models.constant_terminal,
    "call": models.call_terminal,
    "capped-call": models.capped_call_terminal,
    "holder": models.holder_terminal,
    "indicator": models.indicator_terminal,
}

DRIVERS: dict[str, Any] = {
    "zero": models.zero_driver,
    "affine": models.affine_driver,
    "synthetic": models.synthetic_driver,
    "quadratic": models.quadratic_truncated_driver,
    "proxy": None,
}

# Offset that keeps reference seeds away from any seed ^ N used by the runs themselves.
REFERENCE_SEED_OFFSET = 1 << 40


def _call(factory: Callable[..., Any], spec: ComponentSpec, **extra: Any) -> Any:
    try:
        return factory(**{**spec.params, **extra})
    except TypeError as exc:
        raise ConfigError(f"{spec.name}: bad parameters {spec.params}: {exc}") from exc


def build_model(spec: ComponentSpec) -> SdeModel:
    if spec.name not in MODELS:
        raise ConfigError(f"unknown model {spec.name!r}")
    return _call(MODELS[spec.name], spec)


def build_terminal(spec: ComponentSpec) -> TerminalCondition:
    if spec.name not in TERMINALS:
        raise ConfigError(f"unknown terminal {spec.name!r}")
    return _call(TERMINALS[spec.name], spec)


def build_driver(
    spec: ComponentSpec, model: SdeModel, terminal: TerminalCondition, horizon: float
) -> Driver:
    """Driver by name; `cut` (a width eps) switches it off on [T - eps, T]."""

    if spec.name not in DRIVERS:
        raise ConfigError(f"unknown driver {spec.name!r}")
    params = dict(spec.params)
    cut = params.pop("cut", None)

    if spec.name == "proxy":
        base_spec = params.pop("base", {"name": "zero"})
        base = build_driver(ComponentSpec.model_validate(base_spec), model, terminal, horizon)
        v = feynman_kac_v(model, terminal, horizon)
        driver = models.proxy_driver(base, v, model)
    else:
        extra: dict[str, Any] = {"horizon": horizon}
        if spec.name in {"affine", "synthetic"}:
            extra["dim_q"] = model.dim_q
        if spec.name == "quadratic":
            extra["dim_d"] = model.dim_d
        driver = _call(DRIVERS[spec.name], ComponentSpec(name=spec.name, params=params), **extra)

    if cut is not None:
        driver = models.cut_driver(driver, float(cut))
    return driver


def build_backend(spec: BackendSpec, config: Optional[AppConfig] = None) -> Backend:
    config = config or get_config()
    if spec.kind == "quad":
        return quadrature_backend_from_config(config, mode=spec.mode, order=spec.order)
    if spec.kind == "lsmc":
        return regression_backend_from_config(
            config, kind=spec.basis, degree=spec.degree, cells=spec.cells, ridge=spec.ridge
        )
    return NestedBackend(inner_paths=spec.inner_paths)


def build_components(experiment: ExperimentConfig) -> tuple[SdeModel, TerminalCondition, Driver]:
    model = build_model(experiment.model)
    terminal = build_terminal(experiment.terminal)
    driver = build_driver(experiment.driver, model, terminal, experiment.grid.horizon)
    return model, terminal, driver


def build_reference(
    experiment: ExperimentConfig,
    model: SdeModel,
    terminal: TerminalCondition,
    driver: Driver,
) -> Optional[ReferenceSolution]:
    spec = experiment.reference
    if spec.kind == "none":
        return None
    if spec.kind == "closed-form":
        reference = closed_form_or_none(model, terminal, driver)
        if reference is None:
            raise MissingReferenceError(
                f"no closed form for model {model.name!r}, terminal {terminal.name!r} and driver "
                f"{driver.name!r}; use reference.kind: fine-grid"
            )
        return reference

    from bsdegrid.numerics.paths import simulate
    from bsdegrid.numerics.schemes import solve

    grid = make_grid(experiment.grid.horizon, spec.steps, spec.beta)
    backend = build_backend(spec.backend or experiment.backend)
    seed = derive_seed(experiment.seed + REFERENCE_SEED_OFFSET, spec.steps)
    batch = None
    if backend.kind == "lsmc":
        batch = simulate(model, grid, spec.paths, seed, stream=2)
    logger.info("Building fine-grid reference: N=%d beta=%s backend=%s", spec.steps, spec.beta, backend.kind)
    solution = solve(spec.scheme, model, driver, terminal, grid, backend, batch)
    return reference_from_solution(solution)


def closed_form_or_none(
    model: SdeModel, terminal: TerminalCondition, driver: Driver
) -> Optional[ReferenceSolution]:
    """Closed-form reference, or None when the combination has none."""

    try:
        return closed_form(model, terminal, driver)
    except (UnsupportedCombinationError, UnsupportedModelError):
        return None

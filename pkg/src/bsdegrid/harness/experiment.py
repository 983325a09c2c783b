"""Experiment configuration files.

An experiment is a YAML document whose nested sections (`grid.beta`, `backend.kind`, ...) map
onto the pydantic models below. Unknown keys are rejected, and every validation failure is
reported with the line it came from.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from bsdegrid.errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ComponentSpec(_Strict):
    name: str
    params: dict[str, Any] = Field(default_factory=dict)


class GridSpec(_Strict):
    horizon: float = Field(default=1.0, gt=0)
    beta: float = Field(default=1.0, gt=0, le=1)
    steps: list[int] = Field(default_factory=lambda: [8, 16, 32, 64])
    # verify-grid sweep axes; betas defaults to [beta].
    betas: Optional[list[float]] = None
    thetas: Optional[list[float]] = None

    @field_validator("steps")
    @classmethod
    def _increasing(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("steps must not be empty")
        if any(n < 1 for n in value):
            raise ValueError("steps must be positive")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("steps must be strictly increasing")
        return value

    @field_validator("betas")
    @classmethod
    def _betas_in_range(cls, value: Optional[list[float]]) -> Optional[list[float]]:
        if value is not None and any(not (0 < b <= 1) for b in value):
            raise ValueError("every beta must lie in (0, 1]")
        return value

    @field_validator("thetas")
    @classmethod
    def _thetas_in_range(cls, value: Optional[list[float]]) -> Optional[list[float]]:
        if value is not None and any(not (0 < t <= 1) for t in value):
            raise ValueError("every theta must lie in (0, 1]")
        return value


class BackendSpec(_Strict):
    kind: Literal["quad", "lsmc", "nested"] = "quad"
    mode: Literal["lattice", "exact"] = "lattice"
    order: Optional[int] = Field(default=None, ge=1)
    basis: Literal["polynomial", "local-affine"] = "polynomial"
    degree: int = Field(default=3, ge=0)
    cells: int = Field(default=16, ge=1)
    ridge: Optional[float] = Field(default=None, ge=0)
    inner_paths: int = Field(default=1000, ge=2)


class ReferenceSpec(_Strict):
    kind: Literal["closed-form", "fine-grid", "none"] = "closed-form"
    steps: int = Field(default=4096, ge=1)
    beta: float = Field(default=1.0, gt=0, le=1)
    paths: int = Field(default=100_000, ge=2)
    backend: Optional[BackendSpec] = None
    scheme: Literal["euler", "malliavin"] = "euler"


class AcceptanceSpec(_Strict):
    metric: Literal["total", "weighted_z"] = "total"
    slope_min: Optional[float] = None
    slope_max: Optional[float] = None
    max_abs_z_score: float = Field(default=4.0, gt=0)
    alpha_min: Optional[float] = None
    alpha_max: Optional[float] = None
    # Regression runs: |root - quadrature root| must stay within this many combined stderrs.
    backend_agreement_se: Optional[float] = Field(default=None, gt=0)

    @property
    def has_slope_band(self) -> bool:
        return self.slope_min is not None or self.slope_max is not None


class SmoothnessSpec(_Strict):
    times: list[float] = Field(default_factory=lambda: [0.0, 0.5, 0.75, 0.9, 0.95, 0.99])
    paths: int = Field(default=100_000, ge=2)


class ProbeSpec(_Strict):
    steps: int = Field(default=1024, ge=1)
    beta: float = Field(default=1.0, gt=0, le=1)
    paths: int = Field(default=100_000, ge=2)


class OutputSpec(_Strict):
    dir: Path = Path("outputs/experiment")
    parquet: bool = False


class ExperimentConfig(_Strict):
    name: str = "experiment"
    scheme: Literal["euler", "malliavin"] = "euler"
    # Required: no wall-clock default.
    seed: int = Field(ge=0, lt=2**64)
    paths: int = Field(default=100_000, ge=2)
    # Training paths for the regression backend; defaults to `paths`.
    train_paths: Optional[int] = Field(default=None, ge=2)
    substeps: Optional[int] = Field(default=None, ge=1)
    weight_variant: Literal["continuous", "printed"] = "continuous"
    model: ComponentSpec = Field(default_factory=lambda: ComponentSpec(name="standard-brownian"))
    driver: ComponentSpec = Field(default_factory=lambda: ComponentSpec(name="zero"))
    terminal: ComponentSpec = Field(default_factory=lambda: ComponentSpec(name="identity"))
    backend: BackendSpec = Field(default_factory=BackendSpec)
    grid: GridSpec = Field(default_factory=GridSpec)
    reference: ReferenceSpec = Field(default_factory=ReferenceSpec)
    acceptance: AcceptanceSpec = Field(default_factory=AcceptanceSpec)
    smoothness: SmoothnessSpec = Field(default_factory=SmoothnessSpec)
    probe: ProbeSpec = Field(default_factory=ProbeSpec)
    output: OutputSpec = Field(default_factory=OutputSpec)

    @model_validator(mode="after")
    def _known_components(self) -> "ExperimentConfig":
        from bsdegrid.harness.catalog import DRIVERS, MODELS, TERMINALS

        for section, catalog in (("model", MODELS), ("driver", DRIVERS), ("terminal", TERMINALS)):
            name = getattr(self, section).name
            if name not in catalog:
                raise ValueError(f"unknown {section} {name!r}; known: {sorted(catalog)}")
        return self

    @property
    def training_paths(self) -> int:
        return self.train_paths or self.paths


def _line_of(root: Optional[yaml.Node], loc: tuple[Any, ...]) -> Optional[int]:
    node = root
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            match = next((v for k, v in node.value if k.value == str(key)), None)
            if match is None:
                break
            node = match
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
    return None if node is None else node.start_mark.line + 1


def parse_experiment(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark is not None else source
        raise ConfigError(f"{where}: {exc.problem}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: experiment config must be a mapping")

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        root = yaml.compose(text)
        lines = []
        for err in exc.errors():
            loc = tuple(err.get("loc", ()))
            field = ".".join(str(part) for part in loc) or "<root>"
            line = _line_of(root, loc)
            where = f"{source}:{line}" if line is not None else source
            lines.append(f"{where}: {field}: {err.get('msg')}")
        raise ConfigError("\n".join(lines)) from exc


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"experiment config not found: {path}")
    return parse_experiment(path.read_text(encoding="utf-8"), str(path))

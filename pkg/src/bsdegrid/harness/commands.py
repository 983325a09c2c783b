"""Subcommands behind the `bsdegrid` CLI.

Each command takes a `RunContext` and returns a `CommandResult`; exit code 0 means every
acceptance band the experiment declares was met. Output files carry a provenance header
(config hash, seed, library version) and no timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd

from bsdegrid.errors import MissingReferenceError, classify_error
from bsdegrid.harness.catalog import build_backend, build_components, build_reference, closed_form_or_none
from bsdegrid.harness.experiment import BackendSpec, ExperimentConfig
from bsdegrid.numerics.grids import make_grid, sweep_ratio_bounds, sweep_theta_bounds
from bsdegrid.numerics.metrics import RateFit, batch_factory_for, fit_rate, score_batches
from bsdegrid.numerics.models import (
    Driver,
    RateInputs,
    RatePrediction,
    TerminalCondition,
    predicted_rate,
)
from bsdegrid.numerics.oracle import fractional_smoothness_fit
from bsdegrid.numerics.paths import simulate
from bsdegrid.numerics.schemes import (
    DiscreteSolution,
    euler_scheme,
    malliavin_weights_scheme,
    representation_probe,
    solution_to_frame,
    solve,
)
from bsdegrid.settings import AppConfig, get_config
from bsdegrid.storage import datasets
from bsdegrid.storage.batches import cached_simulate, dump_batch
from bsdegrid.utils.cache import FileCache
from bsdegrid.utils.rng import derive_seed

logger = logging.getLogger(__name__)

TRAIN_STREAM = 0
EVAL_STREAM = 1


@dataclass
class RunContext:
    experiment: ExperimentConfig
    out_dir: Path
    threads: int = 1
    config: AppConfig = field(default_factory=get_config)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def header(self, **extra: Any) -> dict[str, Any]:
        digest = datasets.config_hash(self.experiment.model_dump(mode="json"))
        return datasets.provenance_header(digest, self.seed, extra or None)

    def write_table(self, df: pd.DataFrame, path: Path, **extra: Any) -> list[Path]:
        written = [datasets.save_csv(df, path, self.header(**extra), self.config.harness.float_format)]
        if self.experiment.output.parquet or self.config.harness.parquet:
            written.append(datasets.save_parquet(df, path.with_suffix(".parquet")))
        return written

    def cache(self) -> FileCache:
        return FileCache(self.config.paths.cache_dir, enabled=self.config.cache.enabled)


@dataclass
class CommandResult:
    exit_code: int
    outputs: list[Path] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)


def _in_band(value: float, low: Optional[float], high: Optional[float]) -> bool:
    if not math.isfinite(value):
        return False
    if low is not None and value < low:
        return False
    if high is not None and value > high:
        return False
    return True


# --------------------------------------------------------------------------------------------
# verify-grid
# --------------------------------------------------------------------------------------------


def cmd_verify_grid(ctx: RunContext) -> CommandResult:
    spec = ctx.experiment.grid
    betas = spec.betas or [spec.beta]
    thetas = spec.thetas or ctx.config.grids.sweep_thetas
    theta_table = sweep_theta_bounds(betas, thetas, spec.steps, spec.horizon)
    ratio_table = sweep_ratio_bounds(betas, spec.steps, spec.horizon)

    outputs = ctx.write_table(theta_table, datasets.grid_report_csv_path(ctx.out_dir))
    outputs += ctx.write_table(ratio_table, datasets.ratio_report_csv_path(ctx.out_dir))
    failures = int((~theta_table["holds"]).sum())
    summary = {
        "command": "verify-grid",
        "rows": len(theta_table),
        "theta_failures": failures,
        "ratio_exceeded": int((~ratio_table["holds"]).sum()) if len(ratio_table) else 0,
        "min_margin": float(theta_table["margin"].min()),
        "passed": failures == 0,
    }
    outputs.append(datasets.save_json(summary, datasets.summary_json_path(ctx.out_dir)))
    return CommandResult(0 if failures == 0 else 1, outputs, summary)


# --------------------------------------------------------------------------------------------
# simulate / solve
# --------------------------------------------------------------------------------------------


def cmd_simulate(ctx: RunContext) -> CommandResult:
    exp = ctx.experiment
    model, _, _ = build_components(exp)
    cache = ctx.cache()
    outputs: list[Path] = []
    rows = []
    for n in exp.grid.steps:
        grid = make_grid(exp.grid.horizon, n, exp.grid.beta)
        seed = derive_seed(ctx.seed, n)
        batch = cached_simulate(model, grid, exp.training_paths, seed, TRAIN_STREAM, cache)
        outputs += ctx.write_table(grid.to_frame(), datasets.grid_csv_path(ctx.out_dir, n), N=n)
        outputs.append(dump_batch(batch, datasets.batch_dump_path(ctx.out_dir, n)))
        rows.append(
            {
                "N": n,
                "paths": batch.size,
                "mean_terminal_state": float(batch.states[:, -1, 0].mean()),
                "rng": batch.rng_descriptor,
            }
        )
    summary = {"command": "simulate", "runs": rows, "passed": True}
    outputs.append(datasets.save_json(summary, datasets.summary_json_path(ctx.out_dir)))
    return CommandResult(0, outputs, summary)


def cmd_solve(ctx: RunContext) -> CommandResult:
    exp = ctx.experiment
    model, terminal, driver = build_components(exp)
    backend = build_backend(exp.backend, ctx.config)
    outputs: list[Path] = []
    roots = []
    exit_code = 0
    for n in exp.grid.steps:
        grid = make_grid(exp.grid.horizon, n, exp.grid.beta)
        seed = derive_seed(ctx.seed, n)
        try:
            batch = None
            if backend.kind == "lsmc":
                batch = cached_simulate(model, grid, exp.training_paths, seed, TRAIN_STREAM, ctx.cache())
            solution = solve(exp.scheme, model, driver, terminal, grid, backend, batch)
            frame = solution_to_frame(solution, batch)
            outputs += ctx.write_table(frame, datasets.solution_csv_path(ctx.out_dir, n), N=n)
            y0, z0 = solution.root()
            roots.append({"N": n, "y0": y0, "z0": z0.tolist(), "status": "ok"})
        except Exception as exc:  # noqa: BLE001 - recorded as a failure row
            info = classify_error(exc)
            logger.error("solve failed for N=%d: %s", n, info.message)
            roots.append({"N": n, "status": "failed", "error_code": info.code, "error": info.message})
            exit_code = 1
    summary = {"command": "solve", "scheme": exp.scheme, "roots": roots, "passed": exit_code == 0}
    outputs.append(datasets.save_json(summary, datasets.summary_json_path(ctx.out_dir)))
    return CommandResult(exit_code, outputs, summary)


# --------------------------------------------------------------------------------------------
# convergence
# --------------------------------------------------------------------------------------------


def rate_family(scheme: str, terminal: TerminalCondition) -> str:
    """Rate regime of a run: Euler on a terminal that is only Hoelder (theta_phi < 1) has its own."""

    if scheme == "euler" and terminal.theta_phi is not None and terminal.theta_phi < 1.0:
        return "euler-holder"
    return scheme


def predict_for(exp: ExperimentConfig, terminal: TerminalCondition, driver: Driver) -> RatePrediction:
    return predicted_rate(
        rate_family(exp.scheme, terminal),
        RateInputs(
            alpha=terminal.alpha,
            theta_L=driver.theta_L,
            theta_c=driver.theta_c,
            beta=exp.grid.beta,
            theta_phi=terminal.theta_phi,
        ),
    )


def _solve_with(exp: ExperimentConfig, components: tuple, grid, backend, batch) -> DiscreteSolution:
    model, terminal, driver = components
    if exp.scheme == "malliavin":
        return malliavin_weights_scheme(
            model, driver, terminal, grid, backend, batch, weight_variant=exp.weight_variant
        )
    return euler_scheme(model, driver, terminal, grid, backend, batch)


def agreement_score(solution: DiscreteSolution, baseline: DiscreteSolution) -> float:
    """Largest |root difference| over the combined standard error, across Y_0 and each Z_0 component.

    The baseline is deterministic when it reports no standard errors.
    """

    def stacked(sol: DiscreteSolution) -> tuple[np.ndarray, np.ndarray]:
        y, z = sol.root()
        y_err, z_err = sol.root_stderr
        value = np.concatenate([[y], z])
        err = np.concatenate([[0.0 if y_err is None else y_err], np.zeros_like(z) if z_err is None else z_err])
        return value, err

    value, err = stacked(solution)
    base_value, base_err = stacked(baseline)
    diffs = np.abs(value - base_value)
    combined = np.sqrt(err**2 + base_err**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(combined > 0, diffs / combined, np.where(diffs == 0, 0.0, np.inf))
    return float(np.max(scores))


def _run_one(ctx: RunContext, n: int, components: tuple, reference) -> dict[str, Any]:
    exp = ctx.experiment
    model, terminal, driver = components
    grid = make_grid(exp.grid.horizon, n, exp.grid.beta)
    seed = derive_seed(ctx.seed, n)
    agreement: dict[str, Any] = {}
    try:
        backend = build_backend(exp.backend, ctx.config)
        batch = None
        if backend.kind == "lsmc":
            batch = simulate(model, grid, exp.training_paths, seed, stream=TRAIN_STREAM)
        solution = _solve_with(exp, components, grid, backend, batch)
        if exp.acceptance.backend_agreement_se is not None and backend.kind == "lsmc":
            quad = build_backend(BackendSpec(kind="quad", mode="lattice"), ctx.config)
            baseline = _solve_with(exp, components, grid, quad, None)
            y_base, z_base = baseline.root()
            agreement = {
                "y0_quad": y_base,
                "z0_quad": float(z_base[0]),
                "backend_score": agreement_score(solution, baseline),
            }
            logger.info("N=%d lsmc vs quadrature: %.3g combined stderrs", n, agreement["backend_score"])
        report = score_batches(
            solution,
            reference,
            batch_factory_for(model, grid, seed, stream=EVAL_STREAM),
            exp.paths,
            chunk_paths=ctx.config.harness.chunk_paths,
            substeps=exp.substeps,
            theta_L=driver.theta_L,
        )
    except Exception as exc:  # noqa: BLE001 - the sweep continues past a failed N
        info = classify_error(exc)
        logger.error("convergence run failed for N=%d: %s", n, info.message)
        return {"N": n, "status": "failed", "error_code": info.code, "error": info.message}

    datasets.save_json(report.to_dict(), datasets.error_report_json_path(ctx.out_dir, n))
    y0, z0 = solution.root()
    row = report.to_row()
    row.update({"status": "ok", "error_code": "", "error": "", "y0": y0, "z0": float(z0[0])})
    row.update(agreement)
    return row


def _metric_points(rows: list[dict[str, Any]], metric: str) -> list[tuple[int, float]]:
    column = "total" if metric == "total" else "max_weighted_z_rms"
    return [(r["N"], r[column]) for r in rows if r.get("status") == "ok"]


def cmd_convergence(ctx: RunContext) -> CommandResult:
    exp = ctx.experiment
    components = build_components(exp)
    model, terminal, driver = components
    reference = build_reference(exp, model, terminal, driver)
    if reference is None:
        raise MissingReferenceError("convergence needs a reference (closed-form or fine-grid)")

    steps = list(exp.grid.steps)
    with ThreadPoolExecutor(max_workers=max(1, ctx.threads)) as pool:
        rows = list(pool.map(lambda n: _run_one(ctx, n, components, reference), steps))

    columns = [
        "N", "beta", "scheme", "status", "error_code", "error", "max_y", "max_y_stderr", "sum_z",
        "sum_z_stderr", "total", "max_weighted_z_rms", "substeps", "paths", "y0", "z0",
        "y0_quad", "z0_quad", "backend_score",
    ]
    table = pd.DataFrame(rows).reindex(columns=columns)
    outputs = ctx.write_table(table, datasets.convergence_csv_path(ctx.out_dir))

    acceptance = exp.acceptance
    fit: Optional[RateFit] = None
    fit_error = None
    # A single-N run (backend comparison) has no slope to fit unless a band asks for one.
    fit_required = acceptance.has_slope_band or len(steps) >= 3
    if fit_required:
        try:
            fit = fit_rate(_metric_points(rows, acceptance.metric))
        except Exception as exc:  # noqa: BLE001
            fit_error = classify_error(exc)
            logger.error("rate fit failed: %s", fit_error.message)

    family = rate_family(exp.scheme, terminal)
    prediction = predict_for(exp, terminal, driver)

    failed_runs = [r["N"] for r in rows if r.get("status") != "ok"]
    if fit is None:
        passed = not fit_required
    elif fit.degenerate_floor:
        passed = not acceptance.has_slope_band
    else:
        passed = _in_band(fit.slope, acceptance.slope_min, acceptance.slope_max)
    if acceptance.has_slope_band and failed_runs:
        passed = False

    worst_agreement = None
    if acceptance.backend_agreement_se is not None:
        scores = [r.get("backend_score") for r in rows]
        if failed_runs or any(s is None for s in scores):
            passed = False
        else:
            worst_agreement = float(max(scores))
            passed = passed and worst_agreement <= acceptance.backend_agreement_se

    summary = {
        "command": "convergence",
        "name": exp.name,
        "scheme": exp.scheme,
        "model": exp.model.name,
        "terminal": exp.terminal.name,
        "driver": exp.driver.name,
        "declared_alpha": terminal.alpha,
        "beta": exp.grid.beta,
        "metric": acceptance.metric,
        "fit": fit.to_dict() if fit is not None else None,
        "fit_error": fit_error.code if fit_error is not None else None,
        "fitted_slope": fit.slope if fit is not None else float("nan"),
        "predicted_scheme": family,
        "predicted_exponent": prediction.exponent,
        "predicted_grid_constraint_ok": prediction.grid_constraint_ok,
        "predicted_log_factor": prediction.log_factor,
        "slope_band": [acceptance.slope_min, acceptance.slope_max],
        "backend_agreement": worst_agreement,
        "backend_agreement_se": acceptance.backend_agreement_se,
        "failed_runs": failed_runs,
        "reference_disclaimer": reference.disclaimer,
        "passed": passed,
    }
    outputs.append(datasets.save_json(summary, datasets.summary_json_path(ctx.out_dir)))
    return CommandResult(0 if passed else 1, outputs, summary)


# --------------------------------------------------------------------------------------------
# probe-representation
# --------------------------------------------------------------------------------------------


def cmd_probe_representation(ctx: RunContext) -> CommandResult:
    exp = ctx.experiment
    model, terminal, driver = build_components(exp)
    reference = closed_form_or_none(model, terminal, driver)
    if reference is None:
        raise MissingReferenceError(
            f"probe needs a closed-form reference; none for terminal {terminal.name!r} "
            f"with driver {driver.name!r}"
        )

    grid = make_grid(exp.grid.horizon, exp.probe.steps, exp.probe.beta)
    result = representation_probe(
        model, driver, terminal, grid, exp.probe.paths, ctx.seed, reference,
        chunk_paths=ctx.config.harness.chunk_paths,
    )
    target = reference.z(0.0, model.x0[None, :])[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        z_scores = np.where(result.stderr > 0, (result.estimate - target) / result.stderr, np.inf)
    worst = float(np.max(np.abs(z_scores)))
    passed = worst <= exp.acceptance.max_abs_z_score
    table = pd.DataFrame(
        {
            "component": np.arange(model.dim_q),
            "estimate": result.estimate,
            "stderr": result.stderr,
            "reference": target,
            "z_score": z_scores,
        }
    )
    outputs = ctx.write_table(table, ctx.out_dir / "probe.csv", N=exp.probe.steps, M=exp.probe.paths)
    summary = {
        "command": "probe-representation",
        "name": exp.name,
        "paths": result.paths,
        "steps": result.steps,
        "max_abs_z_score": worst,
        "threshold": exp.acceptance.max_abs_z_score,
        "passed": passed,
    }
    outputs.append(datasets.save_json(summary, datasets.summary_json_path(ctx.out_dir)))
    return CommandResult(0 if passed else 1, outputs, summary)


# --------------------------------------------------------------------------------------------
# smoothness / report
# --------------------------------------------------------------------------------------------


def cmd_smoothness(ctx: RunContext) -> CommandResult:
    exp = ctx.experiment
    model, terminal, _ = build_components(exp)
    fit = fractional_smoothness_fit(
        model, terminal, exp.smoothness.times, exp.smoothness.paths, ctx.seed, exp.grid.horizon
    )
    outputs = ctx.write_table(fit.curve, datasets.smoothness_csv_path(ctx.out_dir))
    acceptance = exp.acceptance
    declared = acceptance.alpha_min is not None or acceptance.alpha_max is not None
    passed = (not declared) or (not fit.degenerate and _in_band(fit.alpha_hat, acceptance.alpha_min, acceptance.alpha_max))
    summary = {
        "command": "smoothness",
        "name": exp.name,
        "alpha_hat": fit.alpha_hat,
        "alpha_stderr": fit.stderr,
        "degenerate": fit.degenerate,
        "declared_alpha": terminal.alpha,
        "passed": passed,
    }
    outputs.append(datasets.save_json(summary, datasets.summary_json_path(ctx.out_dir)))
    return CommandResult(0 if passed else 1, outputs, summary)


def _flatten(prefix: str, value: Any, out: dict[str, Any]) -> None:
    if isinstance(value, dict):
        for key, inner in value.items():
            _flatten(f"{prefix}.{key}" if prefix else str(key), inner, out)
    elif not isinstance(value, list):
        out[prefix] = value


def merge_summaries(root: Path) -> pd.DataFrame:
    rows = []
    for path in sorted(root.rglob("summary.json")):
        payload = datasets.load_json(path)
        row: dict[str, Any] = {"run": str(path.parent.relative_to(root)) or "."}
        _flatten("", payload, row)
        rows.append(row)
    return pd.DataFrame(rows)


GRADING_COLUMNS = [
    "terminal", "scheme", "driver", "metric", "uniform_run", "uniform_slope", "graded_run",
    "graded_beta", "graded_slope", "steeper_by", "holds",
]


def grading_checks(table: pd.DataFrame, gain: float) -> pd.DataFrame:
    """Pair uniform-grid (beta = 1) and graded convergence runs of the same problem.

    Only terminals with declared smoothness below 1 are paired: a graded grid must then fit a
    slope at least `gain` steeper than the uniform grid.
    """

    needed = {"command", "terminal", "scheme", "driver", "metric", "beta", "fitted_slope", "declared_alpha"}
    if table.empty or not needed.issubset(table.columns):
        return pd.DataFrame(columns=GRADING_COLUMNS)
    runs = table[(table["command"] == "convergence") & (table["declared_alpha"] < 1.0)]
    rows = []
    for (terminal, scheme, driver, metric), group in runs.groupby(
        ["terminal", "scheme", "driver", "metric"], sort=True
    ):
        uniform = group[group["beta"] >= 1.0]
        graded = group[group["beta"] < 1.0]
        for _, u in uniform.iterrows():
            for _, g in graded.iterrows():
                steeper = float(u["fitted_slope"]) - float(g["fitted_slope"])
                rows.append(
                    {
                        "terminal": terminal,
                        "scheme": scheme,
                        "driver": driver,
                        "metric": metric,
                        "uniform_run": u["run"],
                        "uniform_slope": float(u["fitted_slope"]),
                        "graded_run": g["run"],
                        "graded_beta": float(g["beta"]),
                        "graded_slope": float(g["fitted_slope"]),
                        "steeper_by": steeper,
                        "holds": bool(math.isfinite(steeper) and steeper >= gain),
                    }
                )
    return pd.DataFrame(rows, columns=GRADING_COLUMNS)


def cmd_report(ctx: RunContext) -> CommandResult:
    table = merge_summaries(ctx.out_dir)
    float_format = ctx.config.harness.float_format
    outputs = [datasets.save_csv(table, datasets.report_csv_path(ctx.out_dir), float_format=float_format)]
    passed = bool(table.empty or table.get("passed", pd.Series([True])).fillna(False).astype(bool).all())

    grading = grading_checks(table, ctx.config.harness.grading_slope_gain)
    if not grading.empty:
        outputs.append(datasets.save_csv(grading, datasets.grading_csv_path(ctx.out_dir), float_format=float_format))
        for row in grading.itertuples():
            if not row.holds:
                logger.error(
                    "graded run %s (slope %.3f) is not %.2f steeper than uniform run %s (slope %.3f)",
                    row.graded_run, row.graded_slope, ctx.config.harness.grading_slope_gain,
                    row.uniform_run, row.uniform_slope,
                )
    grading_failures = int((~grading["holds"].astype(bool)).sum()) if not grading.empty else 0
    passed = passed and grading_failures == 0
    summary = {
        "command": "report",
        "runs": len(table),
        "grading_pairs": len(grading),
        "grading_failures": grading_failures,
        "passed": passed,
    }
    return CommandResult(0 if passed else 1, outputs, summary)


COMMANDS: dict[str, Callable[[RunContext], CommandResult]] = {
    "verify-grid": cmd_verify_grid,
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "convergence": cmd_convergence,
    "probe-representation": cmd_probe_representation,
    "smoothness": cmd_smoothness,
    "report": cmd_report,
}

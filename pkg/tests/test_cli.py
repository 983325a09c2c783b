from __future__ import annotations

import json

import pytest

from bsdegrid import cli
from bsdegrid.errors import MissingReferenceError
from bsdegrid.harness.catalog import build_components
from bsdegrid.harness.commands import COMMANDS, RunContext, merge_summaries, predict_for, rate_family
from bsdegrid.harness.experiment import parse_experiment
from bsdegrid.storage import datasets

VERIFY = "name: verify\nseed: 11\ngrid:\n  betas: [0.5, 1.0]\n  steps: [4, 8, 16]\n"

EXACT_FLOOR = """
name: floor
seed: 5
paths: 200
substeps: 2
grid:
  beta: 0.5
  steps: [4, 8, 16]
"""


def _ctx(config, out_dir, text: str) -> RunContext:
    return RunContext(experiment=parse_experiment(text), out_dir=out_dir, threads=2, config=config)


def test_verify_grid_via_main_is_reproducible(tmp_path, capsys) -> None:
    config = tmp_path / "verify.yaml"
    config.write_text(VERIFY, encoding="utf-8")
    first, second = tmp_path / "a", tmp_path / "b"

    assert cli.main(["verify-grid", "--config", str(config), "--out", str(first)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["exit_code"] == 0
    assert cli.main(["verify-grid", "--config", str(config), "--out", str(second)]) == 0

    for name in ("verify_grid.csv", "verify_grid_ratio.csv", "summary.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    header = datasets.read_csv_header(first / "verify_grid.csv")
    assert header["seed"] == "11"
    summary = datasets.load_json(first / "summary.json")
    assert summary["theta_failures"] == 0
    assert summary["rows"] > 0


def test_seed_override_changes_provenance(tmp_path) -> None:
    config = tmp_path / "verify.yaml"
    config.write_text(VERIFY, encoding="utf-8")
    assert cli.main(["verify-grid", "--config", str(config), "--out", str(tmp_path / "o"), "--seed", "99"]) == 0
    assert datasets.read_csv_header(tmp_path / "o" / "verify_grid.csv")["seed"] == "99"


def test_config_errors_exit_2(tmp_path, capsys) -> None:
    assert cli.main(["solve", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 2
    assert cli.main(["solve", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\ngrid:\n  steps: [16, 8]\n", encoding="utf-8")
    assert cli.main(["verify-grid", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "bad.yaml:3" in capsys.readouterr().err


def test_convergence_without_reference_exits_1(tmp_path, capsys) -> None:
    config = tmp_path / "noref.yaml"
    config.write_text("seed: 1\nreference: {kind: none}\n", encoding="utf-8")
    assert cli.main(["convergence", "--config", str(config), "--out", str(tmp_path / "o")]) == 1
    assert "missing_reference" in capsys.readouterr().err


def test_report_merges_summaries(tmp_path) -> None:
    config = tmp_path / "verify.yaml"
    config.write_text(VERIFY, encoding="utf-8")
    runs = tmp_path / "runs"
    cli.main(["verify-grid", "--config", str(config), "--out", str(runs / "one")])
    cli.main(["verify-grid", "--config", str(config), "--out", str(runs / "two")])

    table = merge_summaries(runs)
    assert sorted(table["run"]) == ["one", "two"]
    assert cli.main(["report", "--out", str(runs)]) == 0
    assert (runs / "report.csv").exists()


def test_convergence_on_exact_floor(tmp_path, app_config) -> None:
    result = COMMANDS["convergence"](_ctx(app_config, tmp_path, EXACT_FLOOR))
    assert result.exit_code == 0
    table = datasets.load_csv(tmp_path / "convergence.csv")
    assert list(table["N"]) == [4, 8, 16]
    assert (table["status"] == "ok").all()
    assert (table["total"] < 1e-12).all()
    summary = datasets.load_json(tmp_path / "summary.json")
    assert summary["fit"]["degenerate_floor"] is True
    assert summary["reference_disclaimer"] is None
    assert summary["predicted_scheme"] == "euler"
    assert summary["declared_alpha"] == 1.0
    assert (tmp_path / "error_report_N8.json").exists()


def test_convergence_with_slope_band_fails_on_floor(tmp_path, app_config) -> None:
    text = EXACT_FLOOR + "acceptance:\n  slope_max: -0.5\n"
    result = COMMANDS["convergence"](_ctx(app_config, tmp_path, text))
    assert result.exit_code == 1
    assert result.summary["passed"] is False


LSMC_VS_QUAD = """
seed: 9
paths: 200
train_paths: 20000
terminal: {name: capped-call}
backend: {kind: lsmc, degree: 3}
grid: {beta: 0.9, steps: [4]}
"""


def test_convergence_checks_regression_against_quadrature(tmp_path, app_config) -> None:
    text = LSMC_VS_QUAD + "acceptance: {backend_agreement_se: 5.0}\n"
    result = COMMANDS["convergence"](_ctx(app_config, tmp_path / "ok", text))
    assert result.exit_code == 0
    assert result.summary["fit"] is None
    assert 0.0 <= result.summary["backend_agreement"] <= 5.0
    table = datasets.load_csv(tmp_path / "ok" / "convergence.csv")
    assert table["y0_quad"].notna().all()
    assert table["y0"].iloc[0] == pytest.approx(table["y0_quad"].iloc[0], abs=0.05)

    strict = LSMC_VS_QUAD + "acceptance: {backend_agreement_se: 1.0e-9}\n"
    failed = COMMANDS["convergence"](_ctx(app_config, tmp_path / "strict", strict))
    assert failed.exit_code == 1
    assert failed.summary["backend_agreement"] > 1e-9


def test_holder_terminal_under_euler_uses_holder_rate(tmp_path, app_config) -> None:
    exp = parse_experiment("seed: 1\nterminal: {name: holder, params: {theta: 0.5}}\ngrid: {beta: 0.5}\n")
    _, terminal, driver = build_components(exp)
    assert rate_family("euler", terminal) == "euler-holder"
    assert rate_family("malliavin", terminal) == "malliavin"
    assert predict_for(exp, terminal, driver).scheme == "euler-holder"
    _, capped, _ = build_components(parse_experiment("seed: 1\nterminal: {name: capped-call}\n"))
    assert rate_family("euler", capped) == "euler"

    text = (
        "seed: 4\npaths: 100\nterminal: {name: holder, params: {theta: 0.5}}\n"
        "grid: {beta: 0.5, steps: [2, 4]}\nreference: {kind: fine-grid, steps: 16, beta: 0.5}\n"
    )
    result = COMMANDS["convergence"](_ctx(app_config, tmp_path, text))
    assert result.summary["predicted_scheme"] == "euler-holder"
    assert result.exit_code == 0


def _convergence_summary(root, run: str, beta: float, slope: float, terminal: str = "indicator") -> None:
    payload = {
        "command": "convergence",
        "terminal": terminal,
        "scheme": "euler",
        "driver": "zero",
        "model": "standard-brownian",
        "metric": "total",
        "beta": beta,
        "fitted_slope": slope,
        "declared_alpha": 0.5 if terminal == "indicator" else 1.0,
        "passed": True,
    }
    datasets.save_json(payload, datasets.summary_json_path(root / run))


def test_report_requires_graded_slope_to_be_steeper(tmp_path) -> None:
    runs = tmp_path / "runs"
    _convergence_summary(runs, "uniform", 1.0, -0.5)
    _convergence_summary(runs, "graded", 0.4, -0.9)
    # Lipschitz terminals are not paired: equal slopes are expected there.
    _convergence_summary(runs, "capped_uniform", 1.0, -1.0, terminal="capped-call")
    _convergence_summary(runs, "capped_graded", 0.9, -1.0, terminal="capped-call")
    assert cli.main(["report", "--out", str(runs)]) == 0
    grading = datasets.load_csv(runs / "grading.csv")
    assert len(grading) == 1
    assert grading["graded_run"].iloc[0] == "graded"
    assert grading["steeper_by"].iloc[0] == pytest.approx(0.4)

    _convergence_summary(runs, "graded", 0.4, -0.6)
    assert cli.main(["report", "--out", str(runs)]) == 1
    grading = datasets.load_csv(runs / "grading.csv")
    assert not bool(grading["holds"].iloc[0])


def test_solve_and_simulate_write_per_n_outputs(tmp_path, app_config) -> None:
    text = "seed: 3\npaths: 50\ngrid:\n  beta: 0.5\n  steps: [4, 8]\nterminal: {name: capped-call}\n"
    solved = COMMANDS["solve"](_ctx(app_config, tmp_path / "solve", text))
    assert solved.exit_code == 0
    frame = datasets.load_csv(tmp_path / "solve" / "solution_N8.csv")
    assert len(frame) == 9
    assert [r["status"] for r in solved.summary["roots"]] == ["ok", "ok"]

    simulated = COMMANDS["simulate"](_ctx(app_config, tmp_path / "sim", text))
    assert simulated.exit_code == 0
    assert (tmp_path / "sim" / "batch_N4.bin").exists()
    grid = datasets.load_csv(tmp_path / "sim" / "grid_N8.csv")
    assert grid["t"].iloc[-1] == pytest.approx(1.0)


def test_probe_and_smoothness_commands(tmp_path, app_config) -> None:
    probe = COMMANDS["probe-representation"](
        _ctx(app_config, tmp_path / "probe", "seed: 2\nprobe: {steps: 16, paths: 4000}\n")
    )
    assert probe.exit_code == 0
    assert (tmp_path / "probe" / "probe.csv").exists()
    with pytest.raises(MissingReferenceError):
        COMMANDS["probe-representation"](
            _ctx(app_config, tmp_path / "noref", "seed: 2\ndriver: {name: synthetic}\nprobe: {steps: 4, paths: 10}\n")
        )

    smooth = COMMANDS["smoothness"](
        _ctx(app_config, tmp_path / "smooth", "seed: 2\nterminal: {name: indicator}\nsmoothness: {paths: 2000}\n")
    )
    assert smooth.exit_code == 0
    curve = datasets.load_csv(tmp_path / "smooth" / "smoothness.csv")
    assert len(curve) == 6


def test_log_level_override(monkeypatch) -> None:
    import logging

    from bsdegrid.logging_config import configure_logging

    monkeypatch.delenv("BSDEGRID_LOG_LEVEL", raising=False)
    configure_logging(level="debug")
    assert logging.getLogger("bsdegrid").level == logging.DEBUG
    configure_logging()
    assert logging.getLogger("bsdegrid").level == logging.INFO

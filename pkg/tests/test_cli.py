#!/usr/bin/env python3
"""
End-to-end tests for the psifrac command line.
"""

import csv
import json

import pytest

from conftest import PROBLEMS_DIR
from core.errors import ConvergenceError
from expr.psifrac_cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, REPORT_VERSION, run_cli


@pytest.fixture
def cli(temp_config_dir, capsys):
    """Run the CLI with an isolated config dir; returns (code, report or error, stderr)."""
    def run(*argv):
        code = run_cli(list(argv) + ["--config-dir", str(temp_config_dir)])
        out, err = capsys.readouterr()
        if code == EXIT_OK:
            return code, json.loads(out), err
        lines = [line for line in err.splitlines() if line.startswith("{")]
        return code, json.loads(lines[-1]) if lines else None, err
    return run


def write_problem(tmp_path, text, name="case.prob"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


NO_ROOT = """
[problem]
kind = fundamental
alpha = 0.5
a = 0
b = 2

[psi]
expr = t

[lagrangian]
L = t^2 + 1

[candidate]
x = 0
T = 1
"""


def test_report_envelope(cli):
    code, report, _ = cli("el-check", "--problem", str(PROBLEMS_DIR / "example1_psi1.prob"), "--N", "256")
    assert code == EXIT_OK
    assert report["version"] == REPORT_VERSION
    assert report["command"] == "el-check"
    assert len(report["problem_hash"]) == 64
    assert report["grid_meta"]["N"] >= 1
    lo, hi = report["window"]
    assert 0.0 < lo < hi < 1.0
    assert report["results"]["el_max"] < 1e-6


def test_csv_output(cli, tmp_path):
    out = tmp_path / "nodes.csv"
    code, _, _ = cli("el-check", "--problem", str(PROBLEMS_DIR / "example1_psi1.prob"),
                     "--N", "128", "--csv", str(out))
    assert code == EXIT_OK
    with open(out, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["t", "psi_t", "el_residual", "window_flag"]
    assert len(rows) == 1 + 65
    assert {row[3] for row in rows[1:]} <= {"0", "1"}


def test_op_eval_point(cli):
    code, report, _ = cli("op-eval", "--problem", str(PROBLEMS_DIR / "example1_psi1.prob"),
                          "--op", "caputo-left", "--t", "1.0", "--N", "512")
    assert code == EXIT_OK
    # x = t, alpha = 0.5: t^0.5 / Gamma(1.5)
    assert report["results"]["value"] == pytest.approx(1.0 / 0.886226925452758, rel=1e-9)


def test_terminal_time(cli):
    code, report, _ = cli("terminal-time", "--problem", str(PROBLEMS_DIR / "example1_psi1.prob"),
                          "--N", "512")
    assert code == EXIT_OK
    assert report["results"]["T_star"] == pytest.approx(1.0, abs=1e-9)
    assert report["results"]["J"] == pytest.approx(-2.0 / 3.0, abs=1e-4)


def test_legendre(cli):
    code, report, _ = cli("legendre", "--problem", str(PROBLEMS_DIR / "example1_psi1.prob"), "--N", "128")
    assert code == EXIT_OK
    assert report["results"]["passes"] is True
    assert report["results"]["legendre_min"] == pytest.approx(2.0)


def test_order_opt(cli):
    code, report, _ = cli("order-opt", "--problem", str(PROBLEMS_DIR / "example3_psi1.prob"))
    assert code == EXIT_OK
    assert report["results"]["alpha_star"] == pytest.approx(0.2677, abs=5e-3)
    assert report["results"]["inverse_matches"] is True


def test_sweep_builtin(cli, tmp_path):
    out = tmp_path / "sweep.csv"
    code, report, _ = cli("sweep-alpha", "--psi", "psi1", "--samples", "11", "--csv", str(out))
    assert code == EXIT_OK
    assert len(report["results"]["samples"]) == 11
    assert out.read_text().splitlines()[0] == "alpha,T_star,J"


def test_reproduce_example1(cli):
    code, report, _ = cli("reproduce", "example1", "--psi", "psi2", "--N", "512")
    assert code == EXIT_OK
    results = report["results"]
    assert results["T_star"] == pytest.approx(1.0, abs=1e-9)
    assert results["J_star"] == pytest.approx(-2.0 / 3.0, abs=1e-3)
    assert results["residuals"]["trans_lagrangian"] == pytest.approx(0.0, abs=1e-9)


def test_reproduce_example3_forms(cli):
    code, report, _ = cli("reproduce", "example3", "--psi", "psi2")
    assert code == EXIT_OK
    results = report["results"]
    assert results["alpha_star"] == pytest.approx(0.589, abs=5e-3)
    assert "error" in results["printed"]


def test_missing_problem_file(cli, tmp_path):
    code, error, _ = cli("el-check", "--problem", str(tmp_path / "absent.prob"))
    assert code == EXIT_VALIDATION
    assert error["error"]["type"] == "ProblemFileError"


def test_problem_required(cli):
    code, error, _ = cli("terminal-time")
    assert code == EXIT_VALIDATION
    assert "--problem" in error["error"]["message"]


def test_no_sign_change_is_numerical(cli, tmp_path):
    code, error, _ = cli("terminal-time", "--problem", write_problem(tmp_path, NO_ROOT), "--N", "64")
    assert code == EXIT_NUMERICAL
    assert error["version"] == REPORT_VERSION
    assert error["error"]["type"] == "NoSignChangeError"


def test_bad_arguments(cli):
    code, error, _ = cli("no-such-command")
    assert code == EXIT_VALIDATION
    assert error["version"] == REPORT_VERSION
    assert error["error"]["type"] == "UsageError"
    code, error, _ = cli("op-eval", "--op", "caputo-sideways")
    assert code == EXIT_VALIDATION
    assert error["error"]["type"] == "UsageError"


def test_iso_check_needs_multiplier(cli, tmp_path):
    text = (PROBLEMS_DIR / "example2_psi1.prob").read_text()
    text = text.replace("lambda_hint = -2\n", "").replace("lambda = -2\n", "")
    code, error, _ = cli("iso-check", "--problem", write_problem(tmp_path, text), "--N", "128")
    assert code == EXIT_VALIDATION
    assert "multiplier" in error["error"]["message"]


@pytest.mark.slow
def test_direct_min(cli):
    code, report, _ = cli("direct-min", "--problem", str(PROBLEMS_DIR / "example1_psi1.prob"), "--N", "512")
    assert code == EXIT_OK
    assert report["results"]["J_best"] <= -2.0 / 3.0 + 1e-2


def test_convergence_failure_is_numerical(cli, mocker):
    solve = mocker.patch("core.solvers.find_terminal_time",
                         side_effect=ConvergenceError("root finding stalled after 1 iteration"))
    code, error, _ = cli("terminal-time", "--problem", str(PROBLEMS_DIR / "example1_psi1.prob"), "--N", "64")
    assert code == EXIT_NUMERICAL
    assert error["error"]["type"] == "ConvergenceError"
    solve.assert_called_once()


def test_log_level_flag(cli):
    code, _, err = cli("terminal-time", "--problem", str(PROBLEMS_DIR / "example1_psi1.prob"),
                       "--N", "64", "--log-level", "DEBUG")
    assert code == EXIT_OK
    assert "DEBUG core.solvers" in err


@pytest.mark.parametrize("raised,expected", [
    (ValueError("bad shape"), EXIT_VALIDATION),
    (ZeroDivisionError("division by zero"), EXIT_NUMERICAL),
])
def test_unexpected_errors_keep_json_shape(cli, mocker, raised, expected):
    mocker.patch("core.solvers.find_terminal_time", side_effect=raised)
    code, error, _ = cli("terminal-time", "--problem", str(PROBLEMS_DIR / "example1_psi1.prob"), "--N", "64")
    assert code == expected
    assert error["version"] == REPORT_VERSION
    assert error["error"] == {"type": type(raised).__name__, "message": str(raised)}


def test_direct_min_rejects_isoperimetric(cli):
    code, error, _ = cli("direct-min", "--problem", str(PROBLEMS_DIR / "example2_psi1.prob"), "--N", "64")
    assert code == EXIT_VALIDATION
    assert "fundamental and extended" in error["error"]["message"]

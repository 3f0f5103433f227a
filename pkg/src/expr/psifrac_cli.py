#!/usr/bin/env python3
"""
psifrac command line.
Runs fractional operators, residual checks and solvers on problem files and
writes a JSON report to stdout, with optional CSV data for plotting.
"""

import argparse
import csv
import json
import logging
import os
import sys
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

# Make the src/ packages importable when run as a script
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core import frac_ops, reference_problems, solvers, variational
from core.config_manager import ConfigManager
from core.errors import NumericalError, ProblemFileError, PsiFracError, ValidationError
from core.frac_ops import QuadGrid
from expr.problem_file import ProblemFile, load, problem_hash

logger = logging.getLogger(__name__)

REPORT_VERSION = "psifrac-report/1"
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

OPERATORS = ("integral-left", "integral-right", "caputo-left", "caputo-right", "rl-right")
EXAMPLES = ("example1", "example2", "example3", "counterexample")


class _Run:
    """Shared state of one CLI invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = ConfigManager(args.config_dir)
        self.workers = self.config.worker_count()
        self._pf: Optional[ProblemFile] = None

    @property
    def pf(self) -> ProblemFile:
        if self._pf is None:
            if not getattr(self.args, "problem", None):
                raise ProblemFileError("--problem is required for this command")
            self._pf = load(self.args.problem)
        return self._pf

    def grid(self, pf: Optional[ProblemFile] = None) -> QuadGrid:
        pf = pf or self.pf
        grid = pf.build_grid(self.config)
        if self.args.N is not None:
            grid = QuadGrid.build(pf.problem.psi, self.args.N, self.args.scheme or grid.scheme)
        elif self.args.scheme is not None:
            grid = QuadGrid.build(pf.problem.psi, grid.N, self.args.scheme)
        return grid

    def builtin_grid(self, problem: variational.ProblemSpec) -> QuadGrid:
        N = self.args.N or int(self.config.get("grid_points"))
        return QuadGrid.build(problem.psi, N, self.args.scheme or self.config.get("grid_scheme"))

    def window_fraction(self) -> float:
        if self._pf is not None:
            return self._pf.window_fraction(self.config)
        return float(self.config.get("window_fraction"))

    def root_config(self, lo_key: str = "t_lo", hi_key: str = "t_hi") -> solvers.RootConfig:
        settings = self.pf.solver_settings if self._pf is not None else {}
        bracket = None
        if lo_key in settings and hi_key in settings:
            bracket = (settings[lo_key], settings[hi_key])
        return solvers.RootConfig(
            bracket=bracket,
            tol_x=float(settings.get("tol_x", self.config.get("root_tol_x"))),
            tol_f=float(settings.get("tol_f", self.config.get("root_tol_f"))),
            max_iter=int(settings.get("max_iter", self.config.get("root_max_iter"))))


def _report(command: str, hash_: str, grid_meta: Dict, window, results: Dict) -> Dict:
    return {
        "version": REPORT_VERSION,
        "command": command,
        "problem_hash": hash_,
        "grid_meta": grid_meta,
        "window": list(window) if window is not None else None,
        "results": results,
    }


def _write_csv(path: Optional[str], header: Sequence[str], rows: Iterable[Sequence]):
    if not path:
        return
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_csv_cell(v) for v in row])
    except OSError as e:
        raise ValidationError(f"cannot write CSV {path}: {e}") from e
    logger.info("wrote %s", path)


def _csv_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _node_rows(report: variational.ResidualReport, psi) -> List[List]:
    flags = report.in_window()
    psi_t = np.asarray(psi(report.nodes), dtype=float) * np.ones_like(report.nodes)
    return [[t, u, r, f] for t, u, r, f in zip(report.nodes, psi_t, report.el_nodes, flags)]


def _residual_report(run: _Run, command: str, report: variational.ResidualReport,
                     extra: Optional[Dict] = None) -> Dict:
    results = report.to_dict()
    results.update(extra or {})
    _write_csv(run.args.csv, ("t", "psi_t", "el_residual", "window_flag"),
               _node_rows(report, run.pf.problem.psi))
    return _report(command, run.pf.hash, report.grid_meta, report.window, results)


# ---------------------------------------------------------------------------
# Subcommands

def cmd_op_eval(run: _Run) -> Dict:
    pf = run.pf
    p = pf.problem
    grid = run.grid()
    x = pf.candidate
    order = p.orders[0]
    op = run.args.op
    end = run.args.end if run.args.end is not None else p.psi.b
    if run.args.t is not None:
        t = run.args.t
        point = {
            "integral-left": lambda: frac_ops.frac_integral_left(x, order, p.psi, t, grid),
            "integral-right": lambda: frac_ops.frac_integral_right(x, order, p.psi, t, grid, end=end),
            "caputo-left": lambda: frac_ops.caputo_left(x, order, p.psi, t, grid),
            "caputo-right": lambda: frac_ops.caputo_right(x, order, p.psi, t, grid, end=end),
            "rl-right": lambda: frac_ops.rl_right(x, order, p.psi, end, t, grid, method=run.args.method),
        }[op]
        value = point()
        _write_csv(run.args.csv, ("t", "psi_t", "value"), [[t, float(p.psi(t)), value]])
        return _report("op-eval", pf.hash, grid.meta(), None,
                       {"op": op, "alpha": order.alpha, "t": t, "end": end, "value": value})
    profile = {
        "integral-left": frac_ops.left_integral_profile,
        "integral-right": frac_ops.right_integral_profile,
        "caputo-left": frac_ops.caputo_left_profile,
        "caputo-right": frac_ops.caputo_right_profile,
        "rl-right": frac_ops.rl_right_profile,
    }[op]
    ts, values = profile(x, order, p.psi, grid, end=end, workers=run.workers)
    psi_t = np.asarray(p.psi(ts), dtype=float) * np.ones_like(ts)
    _write_csv(run.args.csv, ("t", "psi_t", "value"), zip(ts, psi_t, values))
    finite = values[np.isfinite(values)]
    return _report("op-eval", pf.hash, grid.meta(), (float(ts[0]), float(ts[-1])),
                   {"op": op, "alpha": order.alpha, "end": end, "nodes": int(ts.size),
                    "min": float(np.min(finite)) if finite.size else None,
                    "max": float(np.max(finite)) if finite.size else None})


def cmd_el_check(run: _Run) -> Dict:
    pf = run.pf
    p = pf.problem
    grid = run.grid()
    T = pf.require_T()
    if len(pf.candidates) > 1:
        reports = variational.el_residual_multi(p, pf.candidates, p.orders, T, grid,
                                                mode=run.args.mode,
                                                window_fraction=run.window_fraction(),
                                                workers=run.workers)
        _write_csv(run.args.csv, ("coordinate", "t", "psi_t", "el_residual", "window_flag"),
                   ([i + 1] + row for i, r in enumerate(reports) for row in _node_rows(r, p.psi)))
        return _report("el-check", pf.hash, reports[0].grid_meta, reports[0].window,
                       {"coordinates": [r.to_dict() for r in reports],
                        "el_max": max(r.el_max for r in reports)})
    report = variational.el_residual(p, pf.candidate, T, grid, mode=run.args.mode,
                                     window_fraction=run.window_fraction(), workers=run.workers)
    return _residual_report(run, "el-check", report)


def cmd_iso_check(run: _Run) -> Dict:
    pf = run.pf
    lam = run.args.lam if run.args.lam is not None else (pf.lam if pf.lam is not None else pf.problem.lam)
    if lam is None:
        raise ProblemFileError("iso-check needs a multiplier: --lambda, [candidate] lambda or lambda_hint")
    report = variational.isoperimetric_residuals(pf.problem, pf.candidate, pf.require_T(), lam,
                                                 run.grid(), window_fraction=run.window_fraction(),
                                                 workers=run.workers)
    return _residual_report(run, "iso-check", report)


def cmd_legendre(run: _Run) -> Dict:
    pf = run.pf
    grid = run.grid()
    value = variational.legendre_check(pf.problem, pf.candidate, pf.require_T(), grid, workers=run.workers)
    tol = float(run.config.get("tol_legendre"))
    passes = variational.legendre_passes(value, tol)
    if not passes:
        logger.warning("Legendre condition fails: minimum %.6g below -%g", value, tol)
    return _report("legendre", pf.hash, grid.meta(), (pf.problem.a, pf.require_T()),
                   {"legendre_min": value, "passes": passes, "tol": tol})


def cmd_delay_check(run: _Run) -> Dict:
    pf = run.pf
    report = variational.delay_residuals(pf.problem, pf.candidate, pf.require_T(), run.grid(),
                                         window_fraction=run.window_fraction(), workers=run.workers)
    return _residual_report(run, "delay-check", report)


def cmd_highorder_check(run: _Run) -> Dict:
    pf = run.pf
    report = variational.high_order_residuals(pf.problem, pf.candidate, pf.require_T(), run.grid(),
                                              window_fraction=run.window_fraction(),
                                              workers=run.workers)
    return _residual_report(run, "highorder-check", report)


def _order_settings(run: _Run):
    settings = run.pf.solver_settings if run._pf is not None else {}
    form = run.args.form or settings.get("form", "derived")
    reading = run.args.reading or settings.get("reading", "inverse")
    return form, reading


def cmd_order_opt(run: _Run) -> Dict:
    pf = run.pf
    p = pf.problem
    form, reading = _order_settings(run)
    result = solvers.solve_optimal_order(p, run.root_config("alpha_lo", "alpha_hi"), form, reading)
    results = result.to_dict()
    grid_meta = None
    if pf.candidates and pf.T is not None:
        grid = run.grid()
        grid_meta = grid.meta()
        results["stationarity"] = variational.optimal_order_stationarity(
            p, pf.candidate, pf.T, p.orders[0], grid,
            h_alpha=float(run.config.get("alpha_step")), workers=run.workers)
    return _report("order-opt", pf.hash, grid_meta, None, results)


def cmd_terminal_time(run: _Run) -> Dict:
    pf = run.pf
    grid = run.grid()
    T = solvers.find_terminal_time(pf.problem, pf.candidate, run.root_config(), grid)
    J = variational.functional_value(pf.problem, pf.candidate, T, grid, workers=run.workers)
    return _report("terminal-time", pf.hash, grid.meta(), None, {"T_star": T, "J": J})


def cmd_direct_min(run: _Run) -> Dict:
    pf = run.pf
    settings = pf.solver_settings
    cfg = solvers.MinimizeConfig(
        basis_size=int(settings.get("basis_size", run.config.get("basis_size"))),
        simplex_scale=float(settings.get("simplex_scale", run.config.get("simplex_scale"))),
        max_evals=int(settings.get("max_evals", run.config.get("max_evals"))),
        seed=int(settings.get("seed", run.config.get("seed"))))
    grid = run.grid()
    bracket = None
    if "t_lo" in settings and "t_hi" in settings:
        bracket = (settings["t_lo"], settings["t_hi"])
    result = solvers.direct_minimize(pf.problem, cfg, grid, time_bracket=bracket)
    _write_csv(run.args.csv, ("evaluation", "best_J"), enumerate(result.history, start=1))
    return _report("direct-min", pf.hash, grid.meta(), None, result.to_dict())


def _sweep(run: _Run, problem: variational.ProblemSpec, hash_: str, settings: Dict) -> Dict:
    samples = int(run.args.samples or settings.get("samples", 97))
    lo = float(settings.get("alpha_lo", solvers.DEFAULT_ALPHA_BRACKET[0]))
    hi = float(settings.get("alpha_hi", solvers.DEFAULT_ALPHA_BRACKET[1]))
    reading = run.args.reading or settings.get("reading", "inverse")
    rows = solvers.sweep_alpha(problem, samples, (lo, hi), reading)
    _write_csv(run.args.csv, ("alpha", "T_star", "J"), rows)
    best = min(rows, key=lambda r: r[2])
    return _report("sweep-alpha", hash_, None, None,
                   {"samples": [{"alpha": a, "T_star": T, "J": J} for a, T, J in rows],
                    "argmin_alpha": best[0], "min_J": best[2], "reading": reading})


def cmd_sweep_alpha(run: _Run) -> Dict:
    if getattr(run.args, "problem", None):
        return _sweep(run, run.pf.problem, run.pf.hash, run.pf.solver_settings)
    ref = reference_problems.build("example3", run.args.psi)
    return _sweep(run, ref.problem, problem_hash(f"example3:{run.args.psi}"), {})


def cmd_reproduce(run: _Run) -> Dict:
    name = run.args.example
    psi_name = run.args.psi
    kwargs = {} if run.args.alpha is None else {"alpha": run.args.alpha}
    ref = reference_problems.build(name, psi_name, **kwargs)
    p, x = ref.problem, ref.candidate
    hash_ = problem_hash(f"{name}:{psi_name}")
    root_cfg = solvers.RootConfig(tol_x=float(run.config.get("root_tol_x")),
                                  tol_f=float(run.config.get("root_tol_f")),
                                  max_iter=int(run.config.get("root_max_iter")))

    if name == "example3":
        results = {"derived": solvers.solve_optimal_order(p, root_cfg, "derived").to_dict()}
        try:
            results["printed"] = solvers.solve_optimal_order(p, root_cfg, "printed").to_dict()
        except NumericalError as e:
            logger.warning("printed stationarity form: %s", e)
            results["printed"] = {"error": str(e)}
        results["alpha_star"] = results["derived"]["alpha_star"]
        results["T_star"] = results["derived"]["T_star"]
        return _report("reproduce", hash_, None, None, results)

    grid = run.builtin_grid(p)
    fraction = run.window_fraction()
    if name == "example1":
        report = variational.el_residual(p, x, ref.T_star, grid, window_fraction=fraction,
                                         workers=run.workers)
        T = solvers.find_terminal_time(p, x, root_cfg, grid)
        results = {"T_star": T, "J_star": variational.functional_value(p, x, T, grid, workers=run.workers),
                   "residuals": report.to_dict()}
    elif name == "example2":
        lam, T = solvers.solve_isoperimetric(p, x, root_cfg, grid, lambda_hint=ref.lam)
        report = variational.isoperimetric_residuals(p, x, T, lam, grid, window_fraction=fraction,
                                                     workers=run.workers)
        g2 = float(p.dPhi(T))
        results = {"lambda": lam, "T_star": T, "terminal_equation": T ** 2 - 1.0 + 2.0 * g2,
                   "J_star": variational.functional_value(p, x, T, grid, workers=run.workers),
                   "residuals": report.to_dict()}
    else:
        T = solvers.find_terminal_time(p, x, root_cfg, grid)
        perturbations = [(frac_ops.Path.constant(0.0), dT) for dT in (0.1, 0.01, -0.01, -0.1)]
        check = variational.sufficiency_epsilon_check(p, x, T, perturbations, grid, workers=run.workers)
        results = {"T_star": T, "J_star": variational.functional_value(p, x, T, grid),
                   "perturbations": [dT for _, dT in perturbations], **check.to_dict()}
        return _report("reproduce", hash_, grid.meta(), None, results)
    _write_csv(run.args.csv, ("t", "psi_t", "el_residual", "window_flag"), _node_rows(report, p.psi))
    return _report("reproduce", hash_, report.grid_meta, report.window, results)


COMMANDS = {
    "op-eval": cmd_op_eval,
    "el-check": cmd_el_check,
    "iso-check": cmd_iso_check,
    "legendre": cmd_legendre,
    "delay-check": cmd_delay_check,
    "highorder-check": cmd_highorder_check,
    "order-opt": cmd_order_opt,
    "terminal-time": cmd_terminal_time,
    "direct-min": cmd_direct_min,
    "reproduce": cmd_reproduce,
    "sweep-alpha": cmd_sweep_alpha,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psifrac",
                                     description="Fractional calculus with respect to a function psi")

    # Shared options
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", type=str, help="Problem file (.prob)")
    common.add_argument("--csv", type=str, help="Write per-node or per-sample data to this CSV file")
    common.add_argument("--log-level", type=str, choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Override the configured log level")
    common.add_argument("--config-dir", type=str, help="Directory holding config.json")

    # Grid options
    common.add_argument("--N", type=int, help="Number of grid cells")
    common.add_argument("--scheme", type=str, choices=[s.value for s in frac_ops.GridScheme],
                        help="Grid spacing")

    sub = parser.add_subparsers(dest="command", required=True)

    op = sub.add_parser("op-eval", parents=[common], help="Evaluate a fractional operator on the candidate")
    op.add_argument("--op", choices=OPERATORS, default="caputo-left")
    op.add_argument("--t", type=float, help="Evaluation point (profile over the grid if omitted)")
    op.add_argument("--end", type=float, help="Upper limit for right operators (default b)")
    op.add_argument("--method", choices=["caputo", "direct"], default="caputo",
                    help="rl-right evaluation method")

    el = sub.add_parser("el-check", parents=[common], help="Euler-Lagrange and transversality residuals")
    el.add_argument("--mode", choices=["rl", "caputo"], default="rl")

    iso = sub.add_parser("iso-check", parents=[common], help="Isoperimetric conditions")
    iso.add_argument("--lambda", dest="lam", type=float, help="Multiplier")

    sub.add_parser("legendre", parents=[common], help="Legendre condition along the candidate")
    sub.add_parser("delay-check", parents=[common], help="Delay problem conditions")
    sub.add_parser("highorder-check", parents=[common], help="High-order problem conditions")

    order = sub.add_parser("order-opt", parents=[common], help="Optimal fractional order")
    order.add_argument("--form", choices=["derived", "printed"])
    order.add_argument("--reading", choices=["inverse", "literal"])

    sub.add_parser("terminal-time", parents=[common], help="Terminal time with L[x](T) = 0")
    sub.add_parser("direct-min", parents=[common], help="Nelder-Mead minimization over a psi-power basis")

    rep = sub.add_parser("reproduce", parents=[common], help="Run a built-in worked problem")
    rep.add_argument("example", choices=EXAMPLES)
    rep.add_argument("--psi", choices=["psi1", "psi2"], default="psi1")
    rep.add_argument("--alpha", type=float, help="Order (examples 1-2 and counterexample)")

    sweep = sub.add_parser("sweep-alpha", parents=[common], help="J(x*, T*(alpha), alpha) over alpha")
    sweep.add_argument("--psi", choices=["psi1", "psi2"], default="psi1")
    sweep.add_argument("--samples", type=int)
    sweep.add_argument("--reading", choices=["inverse", "literal"])

    return parser


def _error_json(kind: str, message: str) -> str:
    return json.dumps({"version": REPORT_VERSION, "error": {"type": kind, "message": message}})


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    Returns:
        int: 0 on success, 2 on validation failure, 3 on numerical failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code == 0:
            return EXIT_OK
        print(_error_json("UsageError", "invalid command line; see the usage message above"), file=sys.stderr)
        return EXIT_VALIDATION

    try:
        run = _Run(args)
        level = args.log_level or run.config.get("log_level", "WARNING")
        logging.basicConfig(level=getattr(logging, str(level).upper(), logging.WARNING), stream=sys.stderr,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
        report = COMMANDS[args.command](run)
    except ValidationError as e:
        print(_error_json(type(e).__name__, str(e)), file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as e:
        print(_error_json(type(e).__name__, str(e)), file=sys.stderr)
        return EXIT_NUMERICAL
    except PsiFracError as e:
        print(_error_json(type(e).__name__, str(e)), file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        logger.debug("unexpected validation failure", exc_info=True)
        print(_error_json(type(e).__name__, str(e)), file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        print(_error_json(type(e).__name__, str(e)), file=sys.stderr)
        return EXIT_NUMERICAL

    print(json.dumps(_finite(report), indent=2, default=_json_default))
    return EXIT_OK


def _finite(value):
    """Replace non-finite floats with None so the report stays valid JSON."""
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    if isinstance(value, (float, np.floating)) and not np.isfinite(value):
        return None
    return value


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def main():
    return run_cli(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())

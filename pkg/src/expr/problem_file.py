#!/usr/bin/env python3
"""
Problem files.
Line-oriented `[section] key = value` documents describing a variational
problem, its candidate and the numerical settings for one run.
"""

import configparser
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path as FilePath
from typing import Dict, List, Optional, Sequence, Tuple


from core.config_manager import ConfigManager
from core.errors import (DifferentiationError, ParseError, ProblemFileError, ValidationError)
from core.frac_ops import GridScheme, Path, PsiMap, QuadGrid
from core.variational import LagrangianDef, ProblemKind, ProblemSpec
from expr.expression import (Binary, Expr, compile_expr, differentiate, parse, to_source)

logger = logging.getLogger(__name__)

SECTIONS: Dict[str, Tuple[str, ...]] = {
    "problem": ("kind", "name", "alpha", "a", "b", "x_a", "A", "x_A", "tau", "lambda_hint",
                "level"),
    "psi": ("expr", "dexpr"),
    "lagrangian": ("L", "partials_check") + tuple(f"d{i}" for i in range(2, 12))
    + tuple(f"d{i}{j}" for i in range(2, 10) for j in range(i, 10)),
    "constraint": ("M", "Phi", "dPhi"),
    "candidate": ("x", "dx", "T", "lambda", "theta") + tuple(f"x{i}" for i in range(1, 10)),
    "grid": ("N", "scheme", "window_fraction"),
    "solver": ("t_lo", "t_hi", "lambda_lo", "lambda_hi", "alpha_lo", "alpha_hi", "tol_x",
               "tol_f", "max_iter", "basis_size", "max_evals", "simplex_scale", "seed",
               "samples", "form", "reading"),
}
REQUIRED = {"problem": ("kind", "alpha", "a", "b"), "psi": ("expr",), "lagrangian": ("L",)}


def problem_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _unquote(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        return value[1:-1]
    return value


def _float(section: str, key: str, value: str) -> float:
    try:
        return float(_unquote(value))
    except ValueError:
        raise ProblemFileError(f"[{section}] {key}: expected a number, got {value!r}") from None


def _floats(section: str, key: str, value: str) -> List[float]:
    parts = [p for p in _unquote(value).replace(",", " ").split() if p]
    if not parts:
        raise ProblemFileError(f"[{section}] {key}: empty list")
    return [_float(section, key, p) for p in parts]


@dataclass
class ProblemFile:
    """A loaded, validated problem file."""
    text: str
    source: str
    problem: ProblemSpec
    candidates: List[Path]
    candidate_exprs: List[str]
    T: Optional[float]
    lam: Optional[float]
    grid_settings: Dict[str, object] = field(default_factory=dict)
    solver_settings: Dict[str, object] = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return problem_hash(self.text)

    @property
    def candidate(self) -> Path:
        if not self.candidates:
            raise ProblemFileError("problem file has no [candidate] x")
        return self.candidates[0]

    def require_T(self) -> float:
        if self.T is None:
            raise ProblemFileError("[candidate] T is required for this command")
        return self.T

    def build_grid(self, config: Optional[ConfigManager] = None, hi: Optional[float] = None) -> QuadGrid:
        """Quadrature grid from [grid], falling back to the configured defaults."""
        config = config or ConfigManager()
        N = int(self.grid_settings.get("N", config.get("grid_points")))
        scheme = self.grid_settings.get("scheme", config.get("grid_scheme"))
        return QuadGrid.build(self.problem.psi, N, scheme, hi=hi)

    def window_fraction(self, config: Optional[ConfigManager] = None) -> float:
        config = config or ConfigManager()
        return float(self.grid_settings.get("window_fraction", config.get("window_fraction")))


class _Reader:
    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    def has(self, section: str, key: str) -> bool:
        return self.parser.has_option(section, key)

    def raw(self, section: str, key: str, default: Optional[str] = None) -> Optional[str]:
        if not self.has(section, key):
            return default
        return _unquote(self.parser.get(section, key))

    def number(self, section: str, key: str, default: Optional[float] = None) -> Optional[float]:
        if not self.has(section, key):
            return default
        return _float(section, key, self.parser.get(section, key))

    def expr(self, section: str, key: str, variables: Sequence[str]) -> Optional[Expr]:
        text = self.raw(section, key)
        if text is None:
            return None
        try:
            return parse(text, variables)
        except ParseError as e:
            message = str(e).rsplit(" (line", 1)[0]
            raise ParseError(f"[{section}] {key}: {message}", e.line, e.column, text) from e


def _slots(kind: ProblemKind, m: int) -> Tuple[str, ...]:
    if kind is ProblemKind.DELAY:
        return ("t", "x", "xtau", "d")
    if kind is ProblemKind.HIGH_ORDER:
        return ("t", "x") + tuple(f"d{i}" for i in range(1, m + 1))
    if m > 1:
        return ("t",) + tuple(f"x{i}" for i in range(1, m + 1)) + tuple(f"d{i}" for i in range(1, m + 1))
    return ("t", "x", "d")


def _lagrangian(reader: _Reader, section: str, key: str, slots: Tuple[str, ...],
                extra: Sequence[str] = (), constants: Optional[Dict[str, float]] = None,
                with_overrides: bool = True) -> LagrangianDef:
    expr = reader.expr(section, key, slots + tuple(extra))
    partials = {}
    second = {}
    for i, name in enumerate(slots[1:], start=2):
        given = reader.expr(section, f"d{i}", slots + tuple(extra)) if with_overrides else None
        try:
            partials[i] = given if given is not None else differentiate(expr, name)
        except DifferentiationError as e:
            logger.warning("%s: no symbolic partial d%d (%s)", key, i, e)
    for i in range(2, len(slots) + 1):
        for j, nj in enumerate(slots[1:], start=2):
            if j < i or i not in partials:
                continue
            given = reader.expr(section, f"d{i}{j}", slots + tuple(extra)) if with_overrides else None
            try:
                second[(i, j)] = given if given is not None else differentiate(partials[i], nj)
            except DifferentiationError:
                pass
    constants = constants or {}
    compiled = lambda e: compile_expr(e, slots, constants)
    return LagrangianDef(compiled(expr), {i: compiled(e) for i, e in partials.items()},
                         {k: compiled(e) for k, e in second.items()}, arity=len(slots),
                         name=f"{key}={to_source(expr)}")


def _psi_map(reader: _Reader, a: float, b: float) -> Tuple[PsiMap, Expr, Expr]:
    expr = reader.expr("psi", "expr", ("t",))
    dexpr = reader.expr("psi", "dexpr", ("t",))
    if dexpr is None:
        dexpr = differentiate(expr, "t")
    psi = PsiMap(compile_expr(expr, ("t",)), compile_expr(dexpr, ("t",)), a, b, name=to_source(expr))
    return psi, expr, dexpr


def _candidate(expr: Expr, dpsi_expr: Expr, orders_needed: int,
               dx_expr: Optional[Expr] = None) -> Path:
    """Path with psi-derivatives obtained symbolically: ((1/psi') d/dt)^k x."""
    derivatives = []
    current = expr
    for k in range(1, orders_needed + 1):
        if k == 1 and dx_expr is not None:
            current = dx_expr
        else:
            try:
                current = Binary("/", differentiate(current, "t"), dpsi_expr)
            except DifferentiationError as e:
                logger.warning("candidate %s: psi-derivative %d unavailable (%s)", to_source(expr), k, e)
                break
        derivatives.append(compile_expr(current, ("t",)))
    return Path(x=compile_expr(expr, ("t",)),
                dx_psi=derivatives[0] if derivatives else None,
                higher_dx_psi=tuple(derivatives[1:]))


def loads(text: str, source: str = "<string>") -> ProblemFile:
    """
    Parse and validate problem-file text.

    Raises:
        ProblemFileError: malformed document, unknown sections or keys, missing
            or inconsistent fields
        ExpressionError: an expression does not parse
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ProblemFileError(f"{source}: {e}") from e

    for section in parser.sections():
        if section not in SECTIONS:
            raise ProblemFileError(f"{source}: unknown section [{section}]")
        unknown = sorted(set(parser.options(section)) - set(SECTIONS[section]))
        if unknown:
            raise ProblemFileError(f"{source}: unknown keys in [{section}]: {', '.join(unknown)}")
    for section, keys in REQUIRED.items():
        for key in keys:
            if not parser.has_option(section, key):
                raise ProblemFileError(f"{source}: missing [{section}] {key}")

    reader = _Reader(parser)
    try:
        kind = ProblemKind(reader.raw("problem", "kind"))
    except ValueError:
        raise ProblemFileError(f"{source}: unknown problem kind {reader.raw('problem', 'kind')!r}; "
                               f"expected one of {', '.join(k.value for k in ProblemKind)}") from None
    alphas = _floats("problem", "alpha", parser.get("problem", "alpha"))
    a = reader.number("problem", "a")
    b = reader.number("problem", "b")
    m = len(alphas)
    if m > 1 and kind not in (ProblemKind.FUNDAMENTAL, ProblemKind.HIGH_ORDER):
        raise ProblemFileError(f"{source}: several orders only for fundamental or high_order problems")

    psi, _, dpsi_expr = _psi_map(reader, a, b)
    slots = _slots(kind, m)
    alpha_value: object = alphas if m > 1 or kind is ProblemKind.HIGH_ORDER else alphas[0]

    raw_x_a = reader.raw("problem", "x_a", "0")
    if raw_x_a.lower() == "free":
        x_a = None
    else:
        values = _floats("problem", "x_a", raw_x_a)
        if m > 1 and kind is ProblemKind.FUNDAMENTAL and len(values) == 1:
            values = values * m
        x_a = values if len(values) > 1 else values[0]

    fields = {"kind": kind, "psi": psi, "alpha": alpha_value, "x_a": x_a, "name": reader.raw("problem", "name", "")}
    if kind is ProblemKind.OPTIMAL_ORDER:
        family = lambda alpha: _lagrangian(reader, "lagrangian", "L", slots, ("alpha",), {"alpha": alpha})
        fields["L"] = family(alphas[0])
        fields["lagrangian_family"] = family
        fields["level"] = reader.number("problem", "level", 20.0)
    else:
        fields["L"] = _lagrangian(reader, "lagrangian", "L", slots)

    if kind is ProblemKind.EXTENDED:
        fields["A"] = reader.number("problem", "A")
        fields["x_A_free"] = (reader.raw("problem", "x_A", "fixed").lower() == "free")
    if kind is ProblemKind.ISOPERIMETRIC:
        for key in ("M", "Phi"):
            if not reader.has("constraint", key):
                raise ProblemFileError(f"{source}: isoperimetric problem needs [constraint] {key}")
        fields["M"] = _lagrangian(reader, "constraint", "M", slots, with_overrides=False)
        phi = reader.expr("constraint", "Phi", ("t",))
        dphi = reader.expr("constraint", "dPhi", ("t",)) or differentiate(phi, "t")
        fields["Phi"] = compile_expr(phi, ("t",))
        fields["dPhi"] = compile_expr(dphi, ("t",))
        fields["lam"] = reader.number("problem", "lambda_hint")
    if kind is ProblemKind.DELAY:
        fields["tau"] = reader.number("problem", "tau")
        theta = reader.expr("candidate", "theta", ("t",))
        if theta is None:
            raise ProblemFileError(f"{source}: delay problem needs [candidate] theta")
        fields["theta"] = compile_expr(theta, ("t",))

    for key, present in (("A", "A" in fields), ("tau", "tau" in fields)):
        if reader.has("problem", key) and not present:
            raise ProblemFileError(f"{source}: [problem] {key} is not valid for kind {kind.value}")

    try:
        problem = ProblemSpec(**fields)
    except ValidationError as e:
        raise ProblemFileError(f"{source}: {e}") from e

    if reader.has("lagrangian", "partials_check"):
        _check_partials(problem, reader.raw("lagrangian", "partials_check"))

    candidates, exprs = [], []
    needed = len(alphas) if kind is ProblemKind.HIGH_ORDER else 1
    keys = [f"x{i}" for i in range(1, m + 1)] if (m > 1 and kind is ProblemKind.FUNDAMENTAL) else ["x"]
    for key in keys:
        expr = reader.expr("candidate", key, ("t",))
        if expr is None:
            continue
        dx = reader.expr("candidate", "dx", ("t",)) if key == "x" else None
        candidates.append(_candidate(expr, dpsi_expr, needed, dx))
        exprs.append(to_source(expr))

    grid_settings: Dict[str, object] = {}
    if reader.has("grid", "N"):
        grid_settings["N"] = int(reader.number("grid", "N"))
    if reader.has("grid", "scheme"):
        try:
            grid_settings["scheme"] = GridScheme(reader.raw("grid", "scheme")).value
        except ValueError:
            raise ProblemFileError(f"{source}: unknown grid scheme {reader.raw('grid', 'scheme')!r}") from None
    if reader.has("grid", "window_fraction"):
        grid_settings["window_fraction"] = reader.number("grid", "window_fraction")

    solver_settings: Dict[str, object] = {}
    for key in SECTIONS["solver"]:
        if reader.has("solver", key):
            solver_settings[key] = reader.raw("solver", key) if key in ("form", "reading") \
                else reader.number("solver", key)

    logger.debug("loaded %s problem from %s", kind.value, source)
    return ProblemFile(text=text, source=source, problem=problem, candidates=candidates,
                       candidate_exprs=exprs, T=reader.number("candidate", "T"),
                       lam=reader.number("candidate", "lambda"),
                       grid_settings=grid_settings, solver_settings=solver_settings)


def _check_partials(problem: ProblemSpec, spec: str):
    """partials_check = "t_lo t_hi y_lo y_hi": compare partials with finite differences."""
    bounds = _floats("lagrangian", "partials_check", spec)
    if len(bounds) != 4:
        raise ProblemFileError("[lagrangian] partials_check takes four numbers: t_lo t_hi y_lo y_hi")
    L = problem.L
    box = [(bounds[0], bounds[1])] + [(bounds[2], bounds[3])] * (L.arity - 1)
    L.check_partials(box)


def load(path) -> ProblemFile:
    path = FilePath(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ProblemFileError(f"cannot read problem file {path}: {e}") from e
    return loads(text, source=str(path))

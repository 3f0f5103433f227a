#!/usr/bin/env python3
"""
Solvers for free-terminal-time fractional variational problems.
Terminal times, isoperimetric multipliers, optimal fractional orders and a
derivative-free direct minimizer used to cross-check extremals.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize

from core.config_manager import ConfigManager
from core.errors import (ConvergenceError, DomainError, NoSignChangeError, ValidationError)
from core.frac_ops import Path, QuadGrid, caputo_left_profile
from core.special_functions import digamma, gamma
from core.variational import (ProblemKind, ProblemSpec, constraint_value, lagrangian_value)

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_BRACKET = (-10.0, 10.0)
DEFAULT_ALPHA_BRACKET = (0.02, 0.98)
LAMBDA_SCAN_POINTS = 17
IDENTICAL_CONSTRAINT_TOL = 1e-6
QUAD_TOL = 1e-11


@dataclass(frozen=True)
class RootConfig:
    """Bracket and tolerances for 1-d root finding."""
    bracket: Optional[Tuple[float, float]] = None
    tol_x: float = 1e-12
    tol_f: float = 1e-9
    max_iter: int = 200

    def __post_init__(self):
        if self.bracket is not None:
            lo, hi = (float(v) for v in self.bracket)
            if not lo < hi:
                raise ValidationError(f"root bracket needs lo < hi, got [{lo}, {hi}]")
            object.__setattr__(self, "bracket", (lo, hi))
        if not (self.tol_x > 0 and self.tol_f > 0):
            raise ValidationError("root tolerances must be positive")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")

    @classmethod
    def from_config(cls, config: ConfigManager, bracket=None) -> "RootConfig":
        return cls(bracket=bracket, tol_x=float(config.get("root_tol_x")),
                   tol_f=float(config.get("root_tol_f")),
                   max_iter=int(config.get("root_max_iter")))

    def with_bracket(self, bracket: Tuple[float, float]) -> "RootConfig":
        return RootConfig(bracket, self.tol_x, self.tol_f, self.max_iter)


@dataclass(frozen=True)
class MinimizeConfig:
    """Settings for the Nelder-Mead direct minimizer."""
    basis_size: int = 3
    simplex_scale: float = 0.25
    max_evals: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.basis_size < 1:
            raise ValidationError("basis_size must be at least 1")
        if self.max_evals < 100:
            raise ValidationError("max_evals must be at least 100")
        if not self.simplex_scale > 0:
            raise ValidationError("simplex_scale must be positive")

    @classmethod
    def from_config(cls, config: ConfigManager) -> "MinimizeConfig":
        return cls(basis_size=int(config.get("basis_size")),
                   simplex_scale=float(config.get("simplex_scale")),
                   max_evals=int(config.get("max_evals")), seed=int(config.get("seed")))


def _root(fn: Callable[[float], float], lo: float, hi: float, cfg: RootConfig, what: str) -> float:
    """Brent's method on [lo, hi] with a residual check at the root."""
    f_lo, f_hi = fn(lo), fn(hi)
    logger.debug("%s: bracket [%g, %g] -> [%g, %g]", what, lo, hi, f_lo, f_hi)
    if not (math.isfinite(f_lo) and math.isfinite(f_hi)):
        raise NoSignChangeError(f"{what}: non-finite value at the bracket ends")
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if f_lo * f_hi > 0.0:
        raise NoSignChangeError(f"{what}: no sign change on [{lo:g}, {hi:g}] "
                                f"(values {f_lo:.3e}, {f_hi:.3e})")
    try:
        root, info = optimize.brentq(fn, lo, hi, xtol=cfg.tol_x, maxiter=cfg.max_iter,
                                     full_output=True, disp=False)
    except RuntimeError as e:
        raise ConvergenceError(f"{what}: {e}") from e
    if not info.converged:
        raise ConvergenceError(f"{what}: no convergence in {cfg.max_iter} iterations ({info.flag})")
    residual = fn(root)
    if abs(residual) > cfg.tol_f:
        raise ConvergenceError(f"{what}: |f(root)|={abs(residual):.3e} above tol_f={cfg.tol_f:g}")
    logger.info("%s: root %.15g after %d iterations", what, root, info.iterations)
    return float(root)


def default_time_bracket(p: ProblemSpec) -> Tuple[float, float]:
    a, b = p.psi.a, p.psi.b
    return a + 0.01 * (b - a), b


def find_terminal_time(p: ProblemSpec, x: Path, cfg: RootConfig, grid: QuadGrid) -> float:
    """
    Terminal time T* with L[x](T*) = 0.

    Raises:
        NoSignChangeError: L[x] keeps its sign on the bracket
        ConvergenceError: iteration cap hit or residual above tol_f
    """
    lo, hi = cfg.bracket or default_time_bracket(p)
    return _root(lambda T: lagrangian_value(p, x, T, grid), lo, hi, cfg, "terminal time")


def solve_isoperimetric(p: ProblemSpec, x: Path, cfg: RootConfig, grid: QuadGrid,
                        lambda_bracket: Tuple[float, float] = DEFAULT_LAMBDA_BRACKET,
                        lambda_hint: Optional[float] = None) -> Tuple[float, float]:
    """
    Solve F[x](T) = lam Phi'(T) and G(x, T) = Phi(T) for (lam, T).

    The outer loop finds lam zeroing the constraint defect at T(lam), where
    T(lam) is the inner terminal-time root. If the constraint holds for every
    T in the bracket, lam comes from lambda_hint (or the problem's lam).

    Returns:
        tuple: (lam, T)
    """
    if p.kind is not ProblemKind.ISOPERIMETRIC:
        raise ValidationError("solve_isoperimetric needs an isoperimetric problem")
    t_lo, t_hi = cfg.bracket or default_time_bracket(p)

    def terminal_time(lam: float) -> float:
        augmented = _with_lagrangian(p, p.L.plus(p.M, lam))
        residual = lambda T: lagrangian_value(augmented, x, T, grid) - lam * float(p.dPhi(T))
        return _root(residual, t_lo, t_hi, cfg, f"terminal time (lambda={lam:g})")

    defect = lambda T: constraint_value(p, x, T, grid) - float(p.Phi(T))
    probes = np.linspace(t_lo, t_hi, 5)
    scale = max(1.0, max(abs(float(p.Phi(T))) for T in probes))
    if all(abs(defect(T)) <= IDENTICAL_CONSTRAINT_TOL * scale for T in probes):
        lam = lambda_hint if lambda_hint is not None else p.lam
        if lam is None:
            raise ValidationError("constraint holds for every T; a multiplier hint is required")
        logger.info("constraint holds identically; using lambda=%g", lam)
        return float(lam), terminal_time(float(lam))

    outer = lambda lam: defect(terminal_time(lam))
    grid_lam = np.linspace(lambda_bracket[0], lambda_bracket[1], LAMBDA_SCAN_POINTS)
    values = []
    for lam in grid_lam:
        try:
            values.append(outer(float(lam)))
        except NoSignChangeError:
            values.append(float("nan"))
    for k in range(len(grid_lam) - 1):
        v0, v1 = values[k], values[k + 1]
        if math.isfinite(v0) and math.isfinite(v1) and v0 * v1 <= 0.0:
            lam = _root(outer, float(grid_lam[k]), float(grid_lam[k + 1]), cfg, "multiplier")
            return lam, terminal_time(lam)
    raise NoSignChangeError(f"no multiplier in [{lambda_bracket[0]:g}, {lambda_bracket[1]:g}] "
                            "zeroes the constraint defect")


def _with_lagrangian(p: ProblemSpec, L) -> ProblemSpec:
    return ProblemSpec(kind=ProblemKind.FUNDAMENTAL, psi=p.psi, L=L, alpha=p.alpha, x_a=p.x_a)


# ---------------------------------------------------------------------------
# Optimal fractional order for the psi-power family

@dataclass
class OptimalOrder:
    """Root of the order-stationarity integral and its terminal time."""
    alpha: float
    T: float
    integral: float
    form: str
    reading: str
    T_inverse: float
    T_literal: float
    inverse_matches: bool
    literal_matches: bool

    def to_dict(self) -> dict:
        return {"alpha_star": self.alpha, "T_star": self.T, "integral": self.integral,
                "form": self.form, "reading": self.reading,
                "T_inverse": self.T_inverse, "T_literal": self.T_literal,
                "inverse_matches": self.inverse_matches, "literal_matches": self.literal_matches}


def _level(p: ProblemSpec) -> float:
    if p.kind is not ProblemKind.OPTIMAL_ORDER or p.level is None:
        raise ValidationError("optimal-order solver needs an optimal_order problem with a level")
    return float(p.level)


def terminal_time_for_order(p: ProblemSpec, alpha: float, reading: str = "inverse") -> float:
    """
    T*(alpha) from (psi(T) - psi(a))^(alpha+2) = 2 * level.

    reading="inverse" solves for T through psi^-1; reading="literal" takes
    T = psi(a) + (2 level)^(1/(alpha+2)) as a time.
    """
    shift = (2.0 * _level(p)) ** (1.0 / (alpha + 2.0))
    if reading == "literal":
        return p.psi.psi_a + shift
    if reading != "inverse":
        raise ValidationError(f"unknown terminal-time reading {reading!r}")
    target = p.psi.psi_a + shift
    if not p.psi.psi_a <= target <= p.psi.psi_b:
        raise DomainError(f"psi(T*)={target:g} outside the psi range; enlarge the interval")
    return float(p.psi.inverse(target))


def _quad(fn: Callable[[float], float], lo: float, hi: float) -> float:
    value, _ = integrate.quad(fn, lo, hi, epsabs=QUAD_TOL, epsrel=1e-10, limit=200)
    return float(value)


def order_stationarity(p: ProblemSpec, alpha: float, form: str = "derived",
                       reading: str = "inverse") -> float:
    """
    dJ/dalpha for x* = (psi - psi(a))^(alpha+1) at T*(alpha).

    form="derived" is the exact alpha-derivative
    Gamma(alpha+2) [Psi(alpha+2)(c - u^(alpha+2)/2) - ln(u) u^(alpha+2)/2];
    form="printed" multiplies the logarithmic term by psi'(t).
    """
    if form not in ("derived", "printed"):
        raise ValidationError(f"unknown stationarity form {form!r}")
    c = _level(p)
    psi = p.psi
    T = terminal_time_for_order(p, alpha, reading)
    g2 = gamma(alpha + 2.0)
    dig = digamma(alpha + 2.0)

    def integrand(t: float) -> float:
        u = float(psi(t)) - psi.psi_a
        if u <= 0.0:
            return g2 * dig * c
        power = u ** (alpha + 2.0)
        log_term = math.log(u) * power / 2.0
        if form == "printed":
            log_term *= float(psi.derivative(t))
        return g2 * (dig * (c - power / 2.0) - log_term)

    return _quad(integrand, psi.a, T)


def order_objective(p: ProblemSpec, alpha: float, reading: str = "inverse") -> Tuple[float, float]:
    """
    (T*(alpha), J(x*, T*(alpha), alpha)) with
    J = Gamma(alpha+2) int_a^T* [c - (psi - psi(a))^(alpha+2)/2] dt.
    """
    c = _level(p)
    psi = p.psi
    T = terminal_time_for_order(p, alpha, reading)
    g2 = gamma(alpha + 2.0)
    value = _quad(lambda t: g2 * (c - max(float(psi(t)) - psi.psi_a, 0.0) ** (alpha + 2.0) / 2.0),
                  psi.a, T)
    return T, value


def sweep_alpha(p: ProblemSpec, samples: int = 97,
                bracket: Tuple[float, float] = DEFAULT_ALPHA_BRACKET,
                reading: str = "inverse") -> List[Tuple[float, float, float]]:
    """(alpha, T*, J) on an even alpha grid over the bracket."""
    if samples < 2:
        raise ValidationError("sweep needs at least two samples")
    rows = []
    for alpha in np.linspace(bracket[0], bracket[1], samples):
        T, J = order_objective(p, float(alpha), reading)
        rows.append((float(alpha), T, J))
    return rows


def solve_optimal_order(p: ProblemSpec, cfg: RootConfig, form: str = "derived",
                        reading: str = "inverse") -> OptimalOrder:
    """
    Order alpha* in the bracket (default [0.02, 0.98]) zeroing the stationarity
    integral, with both terminal-time readings reported.

    Raises:
        NoSignChangeError: no root in the bracket
    """
    lo, hi = cfg.bracket or DEFAULT_ALPHA_BRACKET
    if not (0.0 < lo < hi < 1.0):
        raise DomainError(f"order bracket must lie inside (0, 1), got [{lo}, {hi}]")
    fn = lambda alpha: order_stationarity(p, alpha, form, reading)
    alpha = _root(fn, lo, hi, cfg, f"optimal order ({form})")

    c = _level(p)
    psi = p.psi
    T_literal = terminal_time_for_order(p, alpha, "literal")
    try:
        T_inverse = terminal_time_for_order(p, alpha, "inverse")
    except DomainError:
        T_inverse = float("nan")

    def satisfies(T: float) -> bool:
        if not (math.isfinite(T) and psi.contains(T)):
            return False
        u = float(psi(T)) - psi.psi_a
        return abs(u ** (alpha + 2.0) - 2.0 * c) <= 1e-8 * 2.0 * c

    T = T_inverse if reading == "inverse" else T_literal
    return OptimalOrder(alpha=alpha, T=T, integral=fn(alpha), form=form, reading=reading,
                        T_inverse=T_inverse, T_literal=T_literal,
                        inverse_matches=satisfies(T_inverse), literal_matches=satisfies(T_literal))


# ---------------------------------------------------------------------------
# Direct minimization over a psi-power basis

@dataclass
class MinimizeResult:
    x_best: Path
    T_best: float
    J_best: float
    coefficients: List[float]
    evaluations: int
    exhausted: bool
    pinned: bool = False
    history: List[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"T_best": self.T_best, "J_best": self.J_best, "coefficients": list(self.coefficients),
                "evaluations": self.evaluations, "exhausted": self.exhausted, "pinned": self.pinned}


def power_basis_path(p: ProblemSpec, offset: float, coefficients: Sequence[float]) -> Path:
    """x(t) = offset + sum_k c_k (psi(t) - psi(a))^k with its psi-derivative."""
    psi = p.psi
    coeffs = [float(c) for c in coefficients]

    def value(t):
        u = np.asarray(psi(t), dtype=float) - psi.psi_a
        return offset + sum(c * u ** k for k, c in enumerate(coeffs, start=1)) + 0.0 * u

    def slope(t):
        u = np.asarray(psi(t), dtype=float) - psi.psi_a
        return sum(k * c * u ** (k - 1) for k, c in enumerate(coeffs, start=1)) + 0.0 * u

    return Path(x=value, dx_psi=slope)


def direct_minimize(p: ProblemSpec, cfg: MinimizeConfig, grid: QuadGrid,
                    time_bracket: Optional[Tuple[float, float]] = None) -> MinimizeResult:
    """
    Minimize J over x = x_a + sum_k c_k (psi - psi(a))^k and T with Nelder-Mead.

    Starts from zero coefficients and T = (a + b)/2. The basis Caputo
    derivatives are computed once on the full grid; J(T) is read from the
    cumulative trapezoid integral, from A for extended problems. J_best
    excludes the penalty that keeps T inside the bracket. Deterministic for
    a given seed.
    """
    if p.kind not in (ProblemKind.FUNDAMENTAL, ProblemKind.EXTENDED):
        raise ValidationError(f"direct_minimize handles fundamental and extended problems, not {p.kind.value}")
    if p.L.arity != 3 or isinstance(p.alpha, list):
        raise ValidationError("direct_minimize handles single-order (t, x, d) Lagrangians")
    psi = p.psi
    a, b = psi.a, psi.b
    t_lo, t_hi = time_bracket or default_time_bracket(p)
    # extended costs start at A
    cost_start = p.A if p.kind is ProblemKind.EXTENDED else None
    if cost_start is not None:
        t_lo = max(t_lo, cost_start)
        if t_lo >= t_hi:
            raise ValidationError(f"time bracket ends at {t_hi:g}, not above A={cost_start:g}")
    free_start = p.x_a is None
    offset = 0.0 if free_start else float(p.x_a)
    L = p.lagrangian_for_order()
    order = p.orders[0]

    ts, us = grid.segment(a, b)
    gaps = us - psi.psi_a
    K = cfg.basis_size
    basis = np.vstack([gaps ** k for k in range(1, K + 1)])
    basis_d = np.vstack([
        caputo_left_profile(power_basis_path(p, 0.0, np.eye(K)[k]), order, psi, grid)[1]
        for k in range(K)])

    evaluations = 0
    best = {"J": math.inf, "cost": math.inf, "theta": None}
    history: List[float] = []

    def objective(theta: np.ndarray) -> float:
        nonlocal evaluations
        evaluations += 1
        coeffs = theta[:K]
        shift = theta[K] if free_start else 0.0
        T_raw = theta[-1]
        T = min(max(T_raw, t_lo), t_hi)
        penalty = 1e3 * (T_raw - T) ** 2
        xs = offset + shift + coeffs @ basis
        ds = coeffs @ basis_d
        values = L(ts, xs, ds)
        cumulative = integrate.cumulative_trapezoid(values, ts, initial=0.0)
        cost = float(np.interp(T, ts, cumulative))
        if cost_start is not None:
            cost -= float(np.interp(cost_start, ts, cumulative))
        J = cost + penalty
        if not math.isfinite(J):
            J = math.inf
        if J < best["J"]:
            best.update(J=J, cost=cost, theta=theta.copy())
        history.append(best["J"])
        return J

    dim = K + (1 if free_start else 0) + 1
    start = np.zeros(dim)
    start[-1] = 0.5 * (a + b)
    rng = np.random.default_rng(cfg.seed)
    scales = np.full(dim, cfg.simplex_scale)
    scales[-1] = cfg.simplex_scale * (b - a)
    simplex = [start]
    for i in range(dim):
        vertex = start.copy()
        vertex[i] += scales[i] * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
        simplex.append(vertex)

    result = optimize.minimize(objective, start, method="Nelder-Mead",
                               options={"initial_simplex": np.array(simplex),
                                        "maxfev": cfg.max_evals, "maxiter": cfg.max_evals,
                                        "xatol": 1e-9, "fatol": 1e-12})
    exhausted = not result.success and evaluations >= cfg.max_evals
    if exhausted:
        logger.warning("direct_minimize: %d evaluations exhausted; returning best so far", evaluations)

    theta = best["theta"] if best["theta"] is not None else start
    coeffs = theta[:K]
    shift = float(theta[K]) if free_start else 0.0
    T_best = float(min(max(theta[-1], t_lo), t_hi))
    pinned = T_best >= t_hi - 1e-6 * (t_hi - t_lo)
    if pinned:
        logger.warning("direct_minimize: T pinned at the upper bound %g", t_hi)
    logger.info("direct_minimize: J=%.10g at T=%.6g after %d evaluations", best["cost"], T_best, evaluations)
    return MinimizeResult(x_best=power_basis_path(p, offset + shift, coeffs), T_best=T_best,
                          J_best=float(best["cost"]), coefficients=[float(c) for c in coeffs],
                          evaluations=evaluations, exhausted=exhausted, pinned=pinned, history=history)

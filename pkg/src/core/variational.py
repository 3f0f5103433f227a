#!/usr/bin/env python3
"""
Residual evaluators for free-terminal-time fractional variational problems.

Given a candidate trajectory and terminal time, each evaluator measures how far
the pair is from satisfying the Euler-Lagrange equation, the transversality
conditions and the second-order or sufficiency checks of its problem class.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import qmc

from core.errors import (DomainError, MissingDerivativeError, ValidationError)
from core.frac_ops import (Order, Path, PsiMap, QuadGrid, as_order, caputo_left,
                           caputo_left_profile, caputo_right_profile, frac_integral_right,
                           left_weights, rl_right_profile, SINGULAR_GUARD)
from core.special_functions import rgamma

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_FRACTION = 0.02
DEFAULT_TOL_LEGENDRE = 1e-9
DEFAULT_ALPHA_STEP = 1e-4
ADMISSIBLE_TOL = 1e-8


def vectorize_nary(f: Callable) -> Callable[..., np.ndarray]:
    """Wrap an n-ary real function so that it broadcasts over numpy arrays."""
    scalar_fn = np.vectorize(lambda *a: float(f(*(float(v) for v in a))), otypes=[float])

    def wrapped(*args):
        arrays = np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args])
        try:
            out = np.asarray(f(*arrays), dtype=float)
        except (TypeError, ValueError):
            return scalar_fn(*arrays)
        if out.shape == arrays[0].shape:
            return out
        if out.ndim == 0:
            return np.full(arrays[0].shape, float(out))
        return scalar_fn(*arrays)

    wrapped.__wrapped__ = f
    return wrapped


class LagrangianDef:
    """
    A Lagrangian L(t, y_2, ..., y_arity) with some of its partial derivatives.

    Partials are keyed by 1-based argument position, so for L(t, x, d) the
    keys 2 and 3 are the x and d partials.
    """

    def __init__(self, L: Callable, partials: Optional[Dict[int, Callable]] = None,
                 second_partials: Optional[Dict[Tuple[int, int], Callable]] = None,
                 arity: int = 3, name: str = "L"):
        if arity < 2:
            raise ValidationError("a Lagrangian needs at least the arguments (t, x)")
        self.arity = int(arity)
        self.name = name
        self.L = vectorize_nary(L)
        self._partials: Dict[int, Callable] = {}
        self._second: Dict[Tuple[int, int], Callable] = {}
        for i, f in (partials or {}).items():
            self._check_index(i)
            self._partials[int(i)] = vectorize_nary(f)
        for (i, j), f in (second_partials or {}).items():
            self._check_index(i)
            self._check_index(j)
            self._second[(min(i, j), max(i, j))] = vectorize_nary(f)

    def _check_index(self, i: int):
        if not 2 <= int(i) <= self.arity:
            raise ValidationError(f"{self.name}: partial index {i} outside 2..{self.arity}")

    def __call__(self, *args) -> np.ndarray:
        return self.L(*args)

    def has_partial(self, i: int) -> bool:
        return int(i) in self._partials

    def partial(self, i: int) -> Callable:
        try:
            return self._partials[int(i)]
        except KeyError:
            raise MissingDerivativeError(f"{self.name}: partial derivative d{i} not supplied") from None

    def has_second_partial(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self._second

    def second_partial(self, i: int, j: int) -> Callable:
        try:
            return self._second[(min(i, j), max(i, j))]
        except KeyError:
            raise MissingDerivativeError(
                f"{self.name}: second partial d{i}{j} not supplied") from None

    @property
    def d2L(self):
        return self.partial(2)

    @property
    def d3L(self):
        return self.partial(3)

    @property
    def d4L(self):
        return self.partial(4)

    @property
    def d33L(self):
        return self.second_partial(3, 3)

    def dnL(self, n: int) -> Callable:
        """Partial with respect to the n-th derivative slot of a high-order Lagrangian."""
        return self.partial(n + 2)

    def plus(self, other: "LagrangianDef", lam: float) -> "LagrangianDef":
        """Augmented Lagrangian self + lam * other."""
        if other.arity != self.arity:
            raise ValidationError("augmented Lagrangian needs matching arities")
        lam = float(lam)
        combine = lambda f, g: (lambda *a: f(*a) + lam * g(*a))
        partials = {i: combine(f, other._partials[i])
                    for i, f in self._partials.items() if i in other._partials}
        second = {k: combine(f, other._second[k])
                  for k, f in self._second.items() if k in other._second}
        return LagrangianDef(combine(self.L, other.L), partials, second, arity=self.arity,
                             name=f"{self.name}+{lam:g}*{other.name}")

    def check_partials(self, box: Sequence[Tuple[float, float]], samples: int = 100,
                       rtol: float = 1e-5, seed: int = 0) -> float:
        """
        Compare supplied partials with central differences of L.

        Args:
            box: (lo, hi) per argument, t first
            samples: Number of random interior points
            rtol: Relative tolerance
            seed: RNG seed

        Returns:
            float: Largest relative discrepancy

        Raises:
            ValidationError: discrepancy above rtol
        """
        if len(box) != self.arity:
            raise ValidationError(f"box needs {self.arity} ranges")
        rng = np.random.default_rng(seed)
        lo = np.array([b[0] for b in box], dtype=float)
        hi = np.array([b[1] for b in box], dtype=float)
        points = lo + (hi - lo) * (0.05 + 0.9 * rng.random((samples, self.arity)))
        worst = 0.0
        for i, f in self._partials.items():
            col = i - 1
            h = 1e-6 * np.maximum(1.0, np.abs(points[:, col]))
            up = points.copy()
            dn = points.copy()
            up[:, col] += h
            dn[:, col] -= h
            fd = (self.L(*up.T) - self.L(*dn.T)) / (2.0 * h)
            exact = f(*points.T)
            rel = np.abs(exact - fd) / np.maximum(1.0, np.abs(fd))
            worst = max(worst, float(np.max(rel)))
            if worst > rtol:
                raise ValidationError(
                    f"{self.name}: partial d{i} disagrees with finite differences ({worst:.3e})")
        return worst


class ProblemKind(str, Enum):
    FUNDAMENTAL = "fundamental"
    EXTENDED = "extended"
    ISOPERIMETRIC = "isoperimetric"
    DELAY = "delay"
    HIGH_ORDER = "high_order"
    OPTIMAL_ORDER = "optimal_order"


@dataclass
class ProblemSpec:
    """A variational problem of one of the supported kinds."""
    kind: ProblemKind
    psi: PsiMap
    L: LagrangianDef
    alpha: Union[Order, List[Order]]
    x_a: Optional[Union[float, List[float]]] = 0.0
    # Extended problems
    A: Optional[float] = None
    x_A_free: bool = False
    # Isoperimetric problems
    M: Optional[LagrangianDef] = None
    Phi: Optional[Callable] = None
    dPhi: Optional[Callable] = None
    lam: Optional[float] = None
    # Delay problems
    tau: Optional[float] = None
    theta: Optional[Callable] = None
    # Optimal-order problems: Lagrangian as a function of the order
    lagrangian_family: Optional[Callable[[float], LagrangianDef]] = None
    level: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        self.kind = ProblemKind(self.kind)
        kind = self.kind
        if isinstance(self.alpha, (list, tuple)):
            self.alpha = [as_order(a) for a in self.alpha]
            if not self.alpha:
                raise ValidationError("empty order list")
        else:
            self.alpha = as_order(self.alpha)

        self._forbid(kind is not ProblemKind.EXTENDED, A=self.A)
        self._forbid(kind is not ProblemKind.ISOPERIMETRIC, M=self.M, Phi=self.Phi, dPhi=self.dPhi)
        self._forbid(kind is not ProblemKind.DELAY, tau=self.tau, theta=self.theta)
        self._forbid(kind is not ProblemKind.OPTIMAL_ORDER, lagrangian_family=self.lagrangian_family,
                     level=self.level)

        a, b = self.psi.a, self.psi.b
        if kind is ProblemKind.EXTENDED:
            if self.A is None:
                raise ValidationError("extended problem needs the lower cost limit A")
            if not a < self.A < b:
                raise ValidationError(f"extended problem needs a < A < b, got A={self.A}")
        if kind is ProblemKind.ISOPERIMETRIC and (self.M is None or self.Phi is None or self.dPhi is None):
            raise ValidationError("isoperimetric problem needs M, Phi and Phi'")
        if kind is ProblemKind.DELAY:
            if self.tau is None or self.theta is None:
                raise ValidationError("delay problem needs tau and the history theta")
            if not 0.0 < self.tau < b - a:
                raise ValidationError(f"delay tau must lie in (0, b - a), got {self.tau}")
            if self.L.arity != 4:
                raise ValidationError("delay Lagrangian takes (t, x, xtau, d)")
        if kind is ProblemKind.HIGH_ORDER:
            orders = self.orders
            for n, order in enumerate(orders, start=1):
                if not n - 1 < order.alpha < n:
                    raise ValidationError(f"high-order problem needs alpha_{n} in ({n-1}, {n}), "
                                          f"got {order.alpha}")
            if self.L.arity != len(orders) + 2:
                raise ValidationError("high-order Lagrangian takes (t, x, d1, ..., dm)")
        if kind in (ProblemKind.FUNDAMENTAL, ProblemKind.EXTENDED, ProblemKind.ISOPERIMETRIC,
                    ProblemKind.OPTIMAL_ORDER, ProblemKind.DELAY):
            for order in self.orders:
                order.require_unit_interval(f"{kind.value} problem")
        if kind is ProblemKind.OPTIMAL_ORDER and isinstance(self.alpha, list):
            raise ValidationError("optimal-order problem takes a single order")

    @staticmethod
    def _forbid(condition: bool, **fields):
        if condition:
            present = [k for k, v in fields.items() if v is not None]
            if present:
                raise ValidationError(f"fields {', '.join(present)} not valid for this problem kind")

    @property
    def orders(self) -> List[Order]:
        return list(self.alpha) if isinstance(self.alpha, list) else [self.alpha]

    @property
    def a(self) -> float:
        return self.psi.a

    def lagrangian_at(self, alpha: float) -> LagrangianDef:
        if self.lagrangian_family is not None:
            return self.lagrangian_family(float(alpha))
        return self.L

    def lagrangian_for_order(self) -> LagrangianDef:
        return self.lagrangian_at(self.orders[0].alpha) if self.lagrangian_family else self.L


@dataclass
class ResidualReport:
    """Per-node Euler-Lagrange residuals and terminal-time conditions."""
    el_max: float
    el_nodes: np.ndarray
    nodes: np.ndarray
    trans_integral: float
    trans_lagrangian: float
    legendre_min: Optional[float]
    window: Tuple[float, float]
    grid_meta: dict
    extras: dict = field(default_factory=dict)

    def in_window(self) -> np.ndarray:
        return (self.nodes >= self.window[0]) & (self.nodes <= self.window[1])

    def to_dict(self) -> dict:
        return {
            "el_max": _json_float(self.el_max),
            "trans_integral": _json_float(self.trans_integral),
            "trans_lagrangian": _json_float(self.trans_lagrangian),
            "legendre_min": _json_float(self.legendre_min),
            "window": [float(self.window[0]), float(self.window[1])],
            "grid_meta": dict(self.grid_meta),
            "extras": {k: _json_value(v) for k, v in self.extras.items()},
        }


def _json_float(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _json_value(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_json_value(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, float, np.floating, np.integer)):
        return _json_float(v)
    return v


# ---------------------------------------------------------------------------
# Shared helpers

def report_window(a: float, T: float, fraction: float = DEFAULT_WINDOW_FRACTION) -> Tuple[float, float, float]:
    delta = fraction * (T - a)
    return a + delta, T - delta, delta


def _check_terminal(p: ProblemSpec, T: float, lower: Optional[float] = None):
    lower = p.a if lower is None else lower
    if not (lower < T and p.psi.contains(T)):
        raise DomainError(f"terminal time T={T} must lie in ({lower}, {p.psi.b}]")


def _check_admissible(x: Path, x_a: Optional[float], a: float, label: str = "x"):
    if x_a is None:
        return
    value = float(x(a))
    if abs(value - float(x_a)) > ADMISSIBLE_TOL * max(1.0, abs(float(x_a))):
        raise ValidationError(f"{label}(a)={value:g} differs from the fixed value {x_a:g}")


def _masked_max(values: np.ndarray, mask: np.ndarray) -> float:
    picked = np.abs(values[mask])
    picked = picked[np.isfinite(picked)]
    return float(np.max(picked)) if picked.size else 0.0


def _effective_window(ts: np.ndarray, values: np.ndarray, mask: np.ndarray) -> Tuple[float, float]:
    usable = mask & np.isfinite(values)
    if not np.any(usable):
        logger.warning("no finite residuals inside the report window")
        return float("nan"), float("nan")
    if not np.all(usable[mask]):
        logger.warning("report window shrunk to skip %d non-finite residuals", int(np.sum(mask & ~usable)))
    return float(ts[usable][0]), float(ts[usable][-1])


def _grid_meta(grid: QuadGrid, T: float, fraction: float, **more) -> dict:
    meta = grid.meta()
    meta.update({"T": float(T), "window_fraction": fraction})
    meta.update(more)
    return meta


def _right_integral_derivative(f: Path, gam: float, psi: PsiMap, t: float, grid: QuadGrid,
                               end: float, j: int, step_u: float) -> float:
    """(-d/du)^j of I_{end-}^{gam} f at t by nested central differences with step step_u."""
    if j == 0:
        return frac_integral_right(f, gam, psi, t, grid, end=end)
    u0 = float(psi(t))
    total = 0.0
    for i in range(j + 1):
        u = u0 + (0.5 * j - i) * step_u
        value = frac_integral_right(f, gam, psi, float(psi.inverse(u)), grid, end=end)
        total += (-1.0) ** i * math.comb(j, i) * value
    return (-1.0) ** j * total / step_u ** j


def terminal_limit(f: Path, gam: float, psi: PsiMap, T: float, grid: QuadGrid, delta: float,
                   j: int = 0) -> Tuple[float, float]:
    """
    Limit at T of (-d/du)^j I_{T-}^{gam} f, extrapolated from t = T - delta and
    T - delta/2 assuming the leading behaviour c (psi(T) - psi(t))^(gam - j).

    Returns:
        tuple: (limit, finite-difference step in u)
    """
    t1, t2 = T - delta, T - 0.5 * delta
    u_T = float(psi(T))
    d1 = u_T - float(psi(t1))
    d2 = u_T - float(psi(t2))
    step_u = d2 / (4.0 * max(j, 1))
    i1 = _right_integral_derivative(f, gam, psi, t1, grid, T, j, step_u)
    i2 = _right_integral_derivative(f, gam, psi, t2, grid, T, j, step_u)
    p = gam - j
    w1, w2 = d1 ** p, d2 ** p
    return (i2 * w1 - i1 * w2) / (w1 - w2), step_u


def _candidate_state(p: ProblemSpec, xs: Sequence[Path], orders: Sequence[Order], T: float,
                     grid: QuadGrid, workers: Optional[int]) -> dict:
    """Candidate values, Caputo derivatives and psi' on the nodes of [a, T]."""
    psi = p.psi
    ts, us = grid.segment(psi.a, T)
    state = {"ts": ts, "us": us, "dpsi": np.asarray(psi.derivative(ts), dtype=float) * np.ones_like(ts),
             "x": [np.asarray(x(ts), dtype=float) * np.ones_like(ts) for x in xs], "d": []}
    if p.kind is ProblemKind.HIGH_ORDER:
        x = xs[0]
        for order in orders:
            state["d"].append(caputo_left_profile(x, order, psi, grid, end=T, workers=workers)[1])
    else:
        for x, order in zip(xs, orders):
            state["d"].append(caputo_left_profile(x, order, psi, grid, end=T, workers=workers)[1])
    return state


def _rl_term(f_vals: np.ndarray, order: Order, p: ProblemSpec, grid: QuadGrid, end: float,
             workers: Optional[int], mode: str = "rl", f_end: Optional[float] = None) -> np.ndarray:
    """D_{end-}^{order}(f) on the nodes of [a, end], assembled in RL or Caputo form."""
    psi = p.psi
    if mode == "rl":
        return rl_right_profile(f_vals, order, psi, grid, end=end, workers=workers)[1]
    if mode != "caputo":
        raise ValidationError(f"unknown residual mode {mode!r}")
    ts, us = grid.segment(psi.a, end)
    caputo = caputo_right_profile(f_vals, order, psi, grid, end=end, workers=workers)[1]
    gaps = us[-1] - us
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = f_end * gaps ** (-order.alpha) * rgamma(1.0 - order.alpha)
    values = caputo + boundary
    values[gaps < (us[-1] - psi.psi_a) * SINGULAR_GUARD] = np.nan
    return values


def _legendre_min(L: LagrangianDef, index: int, args: Sequence[np.ndarray]) -> Optional[float]:
    if not L.has_second_partial(index, index):
        return None
    return float(np.min(L.second_partial(index, index)(*args)))


# ---------------------------------------------------------------------------
# Euler-Lagrange residuals

def el_residual_multi(p: ProblemSpec, xs: Sequence[Path], alphas: Sequence[Union[Order, float]],
                      T: float, grid: QuadGrid, mode: str = "rl",
                      window_fraction: float = DEFAULT_WINDOW_FRACTION,
                      workers: Optional[int] = None, lagrangian: Optional[LagrangianDef] = None,
                      terminal_offset: float = 0.0) -> List[ResidualReport]:
    """
    Euler-Lagrange residuals for L(t, x_1..x_m, d_1..d_m).

    Coordinate i has residual d_{i+1}L + D_{T-}^{alpha_i}(d_{i+1+m}L / psi') psi'
    and transversality value I_{T-}^{1-alpha_i}(d_{i+1+m}L / psi') at T; the
    reports share L[x](T) - terminal_offset.

    Raises:
        ValidationError: arity mismatch between paths, orders and L
    """
    L = p.L if lagrangian is None else lagrangian
    orders = [as_order(a) for a in alphas]
    m = len(xs)
    if m < 1 or m != len(orders):
        raise ValidationError(f"need as many orders as paths, got {m} paths and {len(orders)} orders")
    if L.arity != 2 * m + 1:
        raise ValidationError(f"{L.name} takes {L.arity} arguments; {2 * m + 1} expected for m={m}")
    for order in orders:
        order.require_unit_interval("el_residual")
    _check_terminal(p, T)
    fixed = p.x_a if isinstance(p.x_a, (list, tuple)) else [p.x_a] * m
    for i, (x, x_a) in enumerate(zip(xs, fixed), start=1):
        _check_admissible(x, x_a, p.a, label=f"x{i}" if m > 1 else "x")

    psi = p.psi
    state = _candidate_state(p, xs, orders, T, grid, workers)
    ts, dpsi = state["ts"], state["dpsi"]
    args = [ts] + state["x"] + state["d"]
    lo, hi, delta = report_window(p.a, T, window_fraction)
    mask = (ts >= lo) & (ts <= hi)
    terminal_args = [np.array(v[-1]) for v in args]
    trans_lagrangian = float(L(*terminal_args)) - terminal_offset

    reports = []
    for i, order in enumerate(orders):
        x_idx, d_idx = i + 2, i + 2 + m
        f_vals = L.partial(d_idx)(*args) / dpsi
        f_end = float(L.partial(d_idx)(*terminal_args)) / dpsi[-1]
        residual = L.partial(x_idx)(*args) + _rl_term(f_vals, order, p, grid, T, workers, mode,
                                                      f_end=f_end) * dpsi
        trans, _ = terminal_limit(Path.from_samples(ts, f_vals), 1.0 - order.alpha, psi, T, grid, delta)
        reports.append(ResidualReport(
            el_max=_masked_max(residual, mask),
            el_nodes=residual,
            nodes=ts,
            trans_integral=float(trans),
            trans_lagrangian=trans_lagrangian,
            legendre_min=_legendre_min(L, d_idx, args),
            window=_effective_window(ts, residual, mask),
            grid_meta=_grid_meta(grid, T, window_fraction, mode=mode, coordinate=i + 1),
        ))
    return reports


def el_residual(p: ProblemSpec, x: Path, T: float, grid: QuadGrid, mode: str = "rl",
                window_fraction: float = DEFAULT_WINDOW_FRACTION,
                workers: Optional[int] = None) -> ResidualReport:
    """
    Euler-Lagrange residual d2L + D_{T-}^{alpha}(d3L / psi') psi' over the report
    window, with both transversality values at T.

    mode="rl" uses the Riemann-Liouville derivative, mode="caputo" the
    equivalent right Caputo form with the explicit boundary term.
    """
    order = p.orders[0]
    return el_residual_multi(p, [x], [order], T, grid, mode=mode,
                             window_fraction=window_fraction, workers=workers,
                             lagrangian=p.lagrangian_for_order())[0]


def extended_residuals(p: ProblemSpec, x: Path, T: float, grid: QuadGrid,
                       window_fraction: float = DEFAULT_WINDOW_FRACTION,
                       workers: Optional[int] = None) -> ResidualReport:
    """
    Conditions for a cost starting at A > a.

    On [a, A]: D_{T-}(d3L/psi') - D_{A-}(d3L/psi'); on [A, T]: the usual
    residual. Free x(a) or x(A) add their transversality values to extras.
    """
    if p.kind is not ProblemKind.EXTENDED:
        raise ValidationError("extended_residuals needs an extended problem")
    A = float(p.A)
    if not p.a < A < T:
        raise DomainError(f"extended problem needs a < A < T, got A={A}, T={T}")
    _check_terminal(p, T, lower=A)
    _check_admissible(x, p.x_a, p.a)
    order = p.orders[0]
    L, psi = p.L, p.psi

    state = _candidate_state(p, [x], [order], T, grid, workers)
    ts, dpsi = state["ts"], state["dpsi"]
    args = [ts, state["x"][0], state["d"][0]]
    f_vals = L.d3L(*args) / dpsi
    d_T = _rl_term(f_vals, order, p, grid, T, workers)

    ts_A, _ = grid.segment(p.a, A)
    f_head = np.interp(ts_A, ts, f_vals)
    d_A = rl_right_profile(f_head, order, psi, grid, end=A, workers=workers)[1]
    d_T_head = np.interp(ts_A, ts, d_T)

    residual = L.d2L(*args) + d_T * dpsi
    head_residual = d_T_head - d_A

    lo, hi, delta = report_window(p.a, T, window_fraction)
    delta_A = window_fraction * (A - p.a)
    head_mask = (ts_A >= lo) & (ts_A <= A - delta_A)
    tail_mask = (ts >= A) & (ts >= lo) & (ts <= hi)

    all_nodes = np.concatenate((ts_A[head_mask], ts[tail_mask]))
    all_values = np.concatenate((head_residual[head_mask], residual[tail_mask]))

    f_path = Path.from_samples(ts, f_vals)
    trans, _ = terminal_limit(f_path, 1.0 - order.alpha, psi, T, grid, delta)
    terminal_args = [np.array(v[-1]) for v in args]
    extras = {"A": A, "head_max": _masked_max(head_residual, head_mask),
              "tail_max": _masked_max(residual, tail_mask)}
    if p.x_a is None:
        i_T_a = frac_integral_right(f_path, 1.0 - order.alpha, psi, p.a, grid, end=T)
        i_A_a = frac_integral_right(f_path, 1.0 - order.alpha, psi, p.a, grid, end=A)
        extras["trans_free_a"] = i_T_a - i_A_a
    if p.x_A_free:
        extras["trans_free_A"] = terminal_limit(f_path, 1.0 - order.alpha, psi, A, grid,
                                                window_fraction * (A - p.a))[0]
    return ResidualReport(
        el_max=_masked_max(all_values, np.ones(all_values.size, dtype=bool)),
        el_nodes=all_values,
        nodes=all_nodes,
        trans_integral=float(trans),
        trans_lagrangian=float(L(*terminal_args)),
        legendre_min=_legendre_min(L, 3, args),
        window=(float(all_nodes[0]), float(all_nodes[-1])) if all_nodes.size else (lo, hi),
        grid_meta=_grid_meta(grid, T, window_fraction, mode="rl"),
        extras=extras,
    )


def constraint_value(p: ProblemSpec, x: Path, T: float, grid: QuadGrid,
                     workers: Optional[int] = None) -> float:
    """G(x, T) = int_a^T M[x](t) dt."""
    order = p.orders[0]
    state = _candidate_state(p, [x], [order], T, grid, workers)
    ts = state["ts"]
    return float(trapezoid(p.M(ts, state["x"][0], state["d"][0]), ts))


def isoperimetric_residuals(p: ProblemSpec, x: Path, T: float, lam: float, grid: QuadGrid,
                            window_fraction: float = DEFAULT_WINDOW_FRACTION,
                            workers: Optional[int] = None) -> ResidualReport:
    """
    Conditions for the augmented Lagrangian F = L + lam M.

    trans_lagrangian is F[x](T) - lam Phi'(T). extras carry the constraint
    defect |G(x, T) - Phi(T)| and the non-degeneracy margin of M.
    """
    if p.kind is not ProblemKind.ISOPERIMETRIC or p.M is None or p.Phi is None or p.dPhi is None:
        raise ValidationError("isoperimetric_residuals needs M, Phi and Phi'")
    lam = float(lam)
    if not math.isfinite(lam):
        raise ValidationError("multiplier must be finite")
    F = p.L.plus(p.M, lam)
    report = el_residual_multi(p, [x], p.orders, T, grid, window_fraction=window_fraction,
                               workers=workers, lagrangian=F,
                               terminal_offset=lam * float(p.dPhi(T)))[0]
    degeneracy = el_residual_multi(p, [x], p.orders, T, grid, window_fraction=window_fraction,
                                   workers=workers, lagrangian=p.M)[0]
    G = constraint_value(p, x, T, grid, workers)
    report.extras.update({
        "lambda": lam,
        "constraint_value": G,
        "constraint_defect": abs(G - float(p.Phi(T))),
        "nondegeneracy": degeneracy.el_max,
    })
    return report


def legendre_check(p: ProblemSpec, x: Path, T: float, grid: QuadGrid,
                   workers: Optional[int] = None) -> float:
    """Minimum over the nodes of [a, T] of the second partial of L in its derivative slot."""
    _check_terminal(p, T)
    L = p.lagrangian_for_order()
    index = 4 if p.kind is ProblemKind.DELAY else 3
    if not L.has_second_partial(index, index):
        raise MissingDerivativeError(f"{L.name}: second partial d{index}{index} not supplied")
    order = p.orders[0]
    psi = p.psi
    ts, _ = grid.segment(psi.a, T)
    xv = np.asarray(x(ts), dtype=float) * np.ones_like(ts)
    d = caputo_left_profile(x, order, psi, grid, end=T, workers=workers)[1]
    if p.kind is ProblemKind.DELAY:
        args = [ts, xv, _delayed(p, x, ts), d]
    else:
        args = [ts, xv, d]
    return _legendre_min(L, index, args)


def legendre_passes(value: float, tol: float = DEFAULT_TOL_LEGENDRE) -> bool:
    return value >= -tol


# ---------------------------------------------------------------------------
# Delay problems

def _delayed(p: ProblemSpec, x: Path, ts: np.ndarray) -> np.ndarray:
    shifted = ts - p.tau
    history = shifted < p.a
    out = np.empty_like(ts)
    if np.any(history):
        out[history] = np.asarray(np.vectorize(lambda s: float(p.theta(s)))(shifted[history]))
    if np.any(~history):
        out[~history] = np.asarray(x(shifted[~history]), dtype=float) * np.ones(np.sum(~history))
    return out


def _tail_kernel(f_tail: np.ndarray, us_tail: np.ndarray, u_t: np.ndarray, gam: float) -> np.ndarray:
    """(1/Gamma(gam)) int_{tail} (s - u_t)^(gam-1) f(s) ds for points u_t left of the tail."""
    out = np.full(u_t.size, np.nan)
    mirrored = -us_tail[::-1]
    reversed_f = f_tail[::-1]
    for k, u in enumerate(u_t):
        if u <= us_tail[0]:
            out[k] = float(left_weights(mirrored, gam, end=-u) @ reversed_f)
    return out


def delay_split_defect(p: ProblemSpec, f_vals: np.ndarray, T: float, grid: QuadGrid,
                       window_fraction: float = DEFAULT_WINDOW_FRACTION,
                       workers: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Defect of D_{T-} f = D_{(T-tau)-} f - d/du tail(t) on the nodes of [a, T - tau].

    Returns:
        tuple: (nodes, per-node defect, max over the window)
    """
    parts = _delay_parts(p, f_vals, T, grid, workers)
    ts_h = parts["ts_head"]
    defect = parts["d_T_head"] - (parts["d_split"] - parts["tail_slope"])
    lo, _, delta = report_window(p.a, T, window_fraction)
    mask = (ts_h >= lo) & (ts_h <= T - p.tau - delta)
    return ts_h, defect, _masked_max(defect, mask)


def _delay_parts(p: ProblemSpec, f_vals: np.ndarray, T: float, grid: QuadGrid,
                 workers: Optional[int]) -> dict:
    psi = p.psi
    order = p.orders[0]
    split = T - p.tau
    ts, us = grid.segment(psi.a, T)
    d_T = rl_right_profile(f_vals, order, psi, grid, end=T, workers=workers)[1]
    ts_h, us_h = grid.segment(psi.a, split)
    f_head = np.interp(ts_h, ts, f_vals)
    d_split = rl_right_profile(f_head, order, psi, grid, end=split, workers=workers)[1]
    ts_t, us_t = grid.segment(split, T)
    f_tail = np.interp(ts_t, ts, f_vals)
    tail = _tail_kernel(f_tail, us_t, us_h, 1.0 - order.alpha)
    # derivative in u: one grid cell central differences, one-sided at the ends
    finite = np.isfinite(tail)
    slope = np.full(tail.shape, np.nan)
    if np.sum(finite) >= 2:
        slope[finite] = np.gradient(tail[finite], us_h[finite])
    return {"ts": ts, "us": us, "d_T": d_T, "ts_head": ts_h, "us_head": us_h,
            "d_split": d_split, "tail_slope": slope, "d_T_head": np.interp(ts_h, ts, d_T)}


def delay_residuals(p: ProblemSpec, x: Path, T: float, grid: QuadGrid,
                    window_fraction: float = DEFAULT_WINDOW_FRACTION,
                    workers: Optional[int] = None) -> ResidualReport:
    """
    Conditions for L(t, x(t), x(t - tau), d) with history theta on [a - tau, a].

    On [a, T - tau] the residual is d2L(t) + d3L(t + tau) + D_{(T-tau)-}(d4L/psi') psi'
    minus the derivative of the tail integral over [T - tau, T]; on [T - tau, T]
    it is d2L + D_{T-}(d4L/psi') psi'.
    """
    if p.kind is not ProblemKind.DELAY:
        raise ValidationError("delay_residuals needs a delay problem")
    _check_terminal(p, T)
    if not 0.0 < p.tau < T - p.a:
        raise DomainError(f"delay tau={p.tau} must lie in (0, T - a)")
    if p.x_a is not None:
        _check_admissible(x, p.x_a, p.a)
    theta_a = float(p.theta(p.a))
    if abs(theta_a - float(x(p.a))) > ADMISSIBLE_TOL * max(1.0, abs(theta_a)):
        raise ValidationError("candidate does not continue the history at t=a")

    L, psi = p.L, p.psi
    order = p.orders[0]
    ts, _ = grid.segment(psi.a, T)
    dpsi = np.asarray(psi.derivative(ts), dtype=float) * np.ones_like(ts)
    xv = np.asarray(x(ts), dtype=float) * np.ones_like(ts)
    d = caputo_left_profile(x, order, psi, grid, end=T, workers=workers)[1]
    args = [ts, xv, _delayed(p, x, ts), d]
    f_vals = L.d4L(*args) / dpsi

    parts = _delay_parts(p, f_vals, T, grid, workers)
    ts_h = parts["ts_head"]
    shifted = ts_h + p.tau
    shifted_args = [shifted, np.asarray(x(shifted), dtype=float) * np.ones_like(shifted),
                    _delayed(p, x, shifted), np.interp(shifted, ts, d)]
    head_args = [ts_h] + [np.interp(ts_h, ts, v) for v in args[1:]]
    dpsi_h = np.interp(ts_h, ts, dpsi)
    head = (L.d2L(*head_args) + L.partial(3)(*shifted_args)
            + (parts["d_split"] - parts["tail_slope"]) * dpsi_h)
    full = L.d2L(*args) + parts["d_T"] * dpsi

    split = T - p.tau
    lo, hi, delta = report_window(p.a, T, window_fraction)
    head_mask = (ts_h >= lo) & (ts_h <= split - delta)
    tail_mask = (ts >= split) & (ts <= hi)
    nodes = np.concatenate((ts_h[head_mask], ts[tail_mask]))
    values = np.concatenate((head[head_mask], full[tail_mask]))

    defect = parts["d_T_head"] - (parts["d_split"] - parts["tail_slope"])
    trans, _ = terminal_limit(Path.from_samples(ts, f_vals), 1.0 - order.alpha, psi, T, grid, delta)
    terminal_args = [np.array(v[-1]) for v in args]
    return ResidualReport(
        el_max=_masked_max(values, np.ones(values.size, dtype=bool)),
        el_nodes=values,
        nodes=nodes,
        trans_integral=float(trans),
        trans_lagrangian=float(L(*terminal_args)),
        legendre_min=_legendre_min(L, 4, args),
        window=(float(nodes[0]), float(nodes[-1])) if nodes.size else (lo, hi),
        grid_meta=_grid_meta(grid, T, window_fraction, mode="rl", tau=p.tau),
        extras={"split": split, "head_max": _masked_max(head, head_mask),
                "tail_max": _masked_max(full, tail_mask),
                "split_defect": _masked_max(defect, head_mask)},
    )


# ---------------------------------------------------------------------------
# High-order problems

def high_order_residuals(p: ProblemSpec, x: Path, T: float, grid: QuadGrid,
                         window_fraction: float = DEFAULT_WINDOW_FRACTION,
                         workers: Optional[int] = None) -> ResidualReport:
    """
    Residual d2L + sum_n D_{T-}^{alpha_n}(d_{n+2}L / psi') psi' for alpha_n in (n-1, n),
    with the transversality family k = 1..m at T in extras["trans_family"].
    """
    orders = p.orders
    m = len(orders)
    if p.kind not in (ProblemKind.HIGH_ORDER, ProblemKind.FUNDAMENTAL):
        raise ValidationError("high_order_residuals needs a high-order problem")
    if p.L.arity != m + 2:
        raise ValidationError(f"{p.L.name} takes {p.L.arity} arguments; {m + 2} expected")
    _check_terminal(p, T)
    _check_admissible(x, p.x_a if not isinstance(p.x_a, list) else p.x_a[0], p.a)
    if isinstance(p.x_a, list):
        for k, value in enumerate(p.x_a[1:], start=1):
            got = float(x.psi_derivative(p.a, p.psi, k))
            if abs(got - value) > ADMISSIBLE_TOL * max(1.0, abs(value)):
                raise ValidationError(f"initial derivative {k} is {got:g}, expected {value:g}")

    L, psi = p.L, p.psi
    ts, _ = grid.segment(psi.a, T)
    dpsi = np.asarray(psi.derivative(ts), dtype=float) * np.ones_like(ts)
    xv = np.asarray(x(ts), dtype=float) * np.ones_like(ts)
    ds = [caputo_left_profile(x, order, psi, grid, end=T, workers=workers)[1] for order in orders]
    args = [ts, xv] + ds

    residual = np.asarray(L.d2L(*args), dtype=float).copy()
    f_paths = []
    for n, order in enumerate(orders, start=1):
        f_vals = L.dnL(n)(*args) / dpsi
        f_paths.append(Path.from_samples(ts, f_vals))
        residual = residual + rl_right_profile(f_vals, order, psi, grid, end=T, workers=workers)[1] * dpsi

    lo, hi, delta = report_window(p.a, T, window_fraction)
    mask = (ts >= lo) & (ts <= hi)

    family = []
    step = 0.0
    for k in range(1, m + 1):
        total = 0.0
        for n in range(k, m + 1):
            value, step_u = terminal_limit(f_paths[n - 1], n - orders[n - 1].alpha, psi, T, grid,
                                           delta, j=n - k)
            step = max(step, step_u if n > k else 0.0)
            total += value
        family.append(total)

    terminal_args = [np.array(v[-1]) for v in args]
    return ResidualReport(
        el_max=_masked_max(residual, mask),
        el_nodes=residual,
        nodes=ts,
        trans_integral=float(family[0]),
        trans_lagrangian=float(L(*terminal_args)),
        legendre_min=_legendre_min(L, 3, args),
        window=_effective_window(ts, residual, mask),
        grid_meta=_grid_meta(grid, T, window_fraction, mode="rl", fd_step_u=step),
        extras={"trans_family": family, "orders": [o.alpha for o in orders]},
    )


# ---------------------------------------------------------------------------
# Optimal order, convexity and sufficiency

def optimal_order_stationarity(p: ProblemSpec, x: Path, T: float, alpha: Union[Order, float],
                               grid: QuadGrid, h_alpha: float = DEFAULT_ALPHA_STEP,
                               workers: Optional[int] = None) -> float:
    """
    int_a^T d3L[x](t) * dLambda_t/dalpha dt, where Lambda_t(alpha) is the Caputo
    derivative of x at t viewed as a function of the order. The alpha
    derivative is a central difference with step h_alpha.
    """
    order = as_order(alpha)
    if not (0.0 < order.alpha - h_alpha and order.alpha + h_alpha < 1.0):
        raise DomainError(f"alpha +- {h_alpha} leaves (0, 1) at alpha={order.alpha}")
    _check_terminal(p, T)
    psi = p.psi
    L = p.lagrangian_at(order.alpha)
    ts, _ = grid.segment(psi.a, T)
    xv = np.asarray(x(ts), dtype=float) * np.ones_like(ts)
    d = caputo_left_profile(x, order, psi, grid, end=T, workers=workers)[1]
    if not L.has_partial(3):
        raise MissingDerivativeError(f"{L.name}: partial d3 not supplied")
    d3 = L.d3L(ts, xv, d)
    if np.all(d3 == 0.0):
        return 0.0
    up = caputo_left_profile(x, order.alpha + h_alpha, psi, grid, end=T, workers=workers)[1]
    down = caputo_left_profile(x, order.alpha - h_alpha, psi, grid, end=T, workers=workers)[1]
    sensitivity = (up - down) / (2.0 * h_alpha)
    return float(trapezoid(d3 * sensitivity, ts))


@dataclass
class ConvexityReport:
    violations: int
    worst_gap: float
    samples: int

    def to_dict(self) -> dict:
        return {"violations": self.violations, "worst_gap": self.worst_gap, "samples": self.samples}


def convexity_probe(L: LagrangianDef, box: Sequence[Tuple[float, float]], samples: int = 1024,
                    seed: int = 0, tol: float = 1e-9) -> ConvexityReport:
    """
    Check L(t, x+v, d+w) - L(t, x, d) >= d2L v + d3L w at scrambled Sobol points
    of the box (t, x, d, v, w).
    """
    if len(box) != 5:
        raise ValidationError("convexity box needs ranges for (t, x, d, v, w)")
    sampler = qmc.Sobol(d=5, scramble=True, seed=seed)
    points = qmc.scale(sampler.random(samples), [b[0] for b in box], [b[1] for b in box])
    t, x, d, v, w = points.T
    gap = L(t, x + v, d + w) - L(t, x, d) - L.d2L(t, x, d) * v - L.d3L(t, x, d) * w
    return ConvexityReport(violations=int(np.sum(gap < -tol)), worst_gap=float(np.min(gap)),
                           samples=int(samples))


def _integrand(p: ProblemSpec, x: Path, T: float, grid: QuadGrid,
               workers: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    psi = p.psi
    L = p.lagrangian_for_order()
    ts, _ = grid.segment(psi.a, T)
    xv = np.asarray(x(ts), dtype=float) * np.ones_like(ts)
    if p.kind is ProblemKind.HIGH_ORDER:
        ds = [caputo_left_profile(x, o, psi, grid, end=T, workers=workers)[1] for o in p.orders]
        return ts, L(ts, xv, *ds)
    d = caputo_left_profile(x, p.orders[0], psi, grid, end=T, workers=workers)[1]
    if p.kind is ProblemKind.DELAY:
        return ts, L(ts, xv, _delayed(p, x, ts), d)
    return ts, L(ts, xv, d)


def functional_value(p: ProblemSpec, x: Path, T: float, grid: QuadGrid,
                     workers: Optional[int] = None) -> float:
    """J(x, T) by the trapezoid rule; extended problems integrate from A."""
    _check_terminal(p, T)
    ts, values = _integrand(p, x, T, grid, workers)
    if p.kind is ProblemKind.EXTENDED:
        keep = ts > p.A
        start = np.interp(p.A, ts, values)
        ts = np.concatenate(([p.A], ts[keep]))
        values = np.concatenate(([start], values[keep]))
    return float(trapezoid(values, ts))


def lagrangian_value(p: ProblemSpec, x: Path, t: float, grid: QuadGrid) -> float:
    """L[x](t) at a single instant."""
    psi = p.psi
    L = p.lagrangian_for_order()
    xt = float(x(t))
    if p.kind is ProblemKind.HIGH_ORDER:
        ds = [caputo_left(x, o, psi, t, grid) for o in p.orders]
        return float(L(t, xt, *ds))
    d = caputo_left(x, p.orders[0], psi, t, grid)
    if p.kind is ProblemKind.DELAY:
        xtau = float(_delayed(p, x, np.array([t]))[0])
        return float(L(t, xt, xtau, d))
    return float(L(t, xt, d))


@dataclass
class SufficiencyReport:
    min_gap: float
    gaps: List[float]

    def to_dict(self) -> dict:
        return {"min_gap": self.min_gap, "gaps": list(self.gaps)}


def sufficiency_epsilon_check(p: ProblemSpec, x: Path, T: float,
                              perturbations: Sequence[Tuple[Path, float]], grid: QuadGrid,
                              workers: Optional[int] = None) -> SufficiencyReport:
    """
    min over perturbations (v, dT) of J(x + v, T + dT) - J(x, T).

    Raises:
        ValidationError: a perturbation with v(a) != 0
    """
    base = functional_value(p, x, T, grid, workers)
    gaps = []
    for v, dT in perturbations:
        if abs(float(v(p.a))) > 1e-12:
            raise ValidationError(f"perturbation has v(a)={float(v(p.a)):g}, expected 0")
        gaps.append(functional_value(p, x + v, T + float(dT), grid, workers) - base)
    if not gaps:
        return SufficiencyReport(min_gap=0.0, gaps=[])
    return SufficiencyReport(min_gap=float(min(gaps)), gaps=gaps)

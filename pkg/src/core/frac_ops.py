#!/usr/bin/env python3
"""
Fractional integrals and derivatives with respect to a kernel function psi.

Every operator is evaluated in u = psi(t) space, where it becomes a convolution
with (u_t - s)^(gamma - 1). The smooth factor is integrated with
product-trapezoidal weights that are exact when it is piecewise linear in u.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from core.config_manager import worker_count
from core.errors import (DomainError, GridError, MissingDerivativeError,
                         SingularityError, ValidationError)
from core.special_functions import gamma as gamma_fn
from core.special_functions import rgamma

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]
Source = Union["Path", Callable, np.ndarray]

# Numerical constants
PROBE_NODES = 1024
INVERSE_TOL = 1e-13
SINGULAR_GUARD = 1e-6
SAMPLE_AGREEMENT_TOL = 1e-10
DEFAULT_GRID_POINTS = 2048
# Interior nodes closer than this fraction of a mean cell to a segment end are dropped
SNAP_FRACTION = 0.01


def vectorize_callable(f: Callable) -> Callable[[ArrayLike], np.ndarray]:
    """Wrap a real function so that it accepts scalars and numpy arrays alike."""
    scalar_fn = np.vectorize(lambda v: float(f(float(v))), otypes=[float])

    def wrapped(t):
        arr = np.asarray(t, dtype=float)
        try:
            out = np.asarray(f(arr), dtype=float)
        except (TypeError, ValueError):
            return scalar_fn(arr)
        if out.shape == arr.shape:
            return out
        if out.ndim == 0:
            # Constant closures ignore their argument
            return np.full(arr.shape, float(out))
        return scalar_fn(arr)

    wrapped.__wrapped__ = f
    return wrapped


def _to_output(values: np.ndarray) -> ArrayLike:
    return float(values) if np.ndim(values) == 0 else values


class PsiMap:
    """Increasing C^1 kernel function psi on [a, b] together with its derivative."""

    def __init__(self, psi: Callable, dpsi: Callable, a: float, b: float, name: str = "psi"):
        """
        Build and validate a kernel map.

        Args:
            psi: Real function on [a, b]
            dpsi: Its derivative
            a: Left end of the domain
            b: Right end of the domain
            name: Label used in reports

        Raises:
            DomainError: a >= b, psi' not positive, or psi not increasing on the probe grid
        """
        self.a = float(a)
        self.b = float(b)
        self.name = name
        if not (math.isfinite(self.a) and math.isfinite(self.b) and self.a < self.b):
            raise DomainError(f"psi domain requires a < b, got [{a}, {b}]")

        self._psi = vectorize_callable(psi)
        self._dpsi = vectorize_callable(dpsi)

        probe = np.linspace(self.a, self.b, PROBE_NODES)
        values = self._psi(probe)
        slopes = self._dpsi(probe)
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(slopes))):
            raise DomainError(f"{name} is not finite on [{self.a}, {self.b}]")
        if np.any(slopes <= 0.0):
            raise DomainError(f"{name}' must be positive on [{self.a}, {self.b}]")
        if np.any(np.diff(values) <= 0.0):
            raise DomainError(f"{name} must be strictly increasing on [{self.a}, {self.b}]")

        self.psi_a = float(values[0])
        self.psi_b = float(values[-1])

    def __call__(self, t: ArrayLike) -> ArrayLike:
        return _to_output(self._psi(t))

    def derivative(self, t: ArrayLike) -> ArrayLike:
        return _to_output(self._dpsi(t))

    @property
    def span(self) -> float:
        return self.psi_b - self.psi_a

    def fd_step(self) -> float:
        """Finite-difference step used to synthesize psi-derivatives."""
        return max(1e-6, 1e-8 * (self.b - self.a))

    def contains(self, t: float) -> bool:
        tol = 1e-12 * (self.b - self.a)
        return self.a - tol <= t <= self.b + tol

    def inverse(self, u: ArrayLike) -> ArrayLike:
        """psi^{-1}(u) by vectorized bisection on [a, b] to 1e-13."""
        u = np.asarray(u, dtype=float)
        slack = 1e-12 * max(1.0, abs(self.span))
        if np.any(u < self.psi_a - slack) or np.any(u > self.psi_b + slack):
            raise DomainError(f"{self.name}^-1: value outside [{self.psi_a}, {self.psi_b}]")
        lo = np.full(u.shape, self.a)
        hi = np.full(u.shape, self.b)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self._psi(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) <= INVERSE_TOL:
                break
        return _to_output(0.5 * (lo + hi))

    def shifted(self, c: float) -> "PsiMap":
        """Same map translated by a constant, psi(t) + c."""
        psi = self._psi
        return PsiMap(lambda t: psi(t) + c, self._dpsi, self.a, self.b, name=f"{self.name}+{c:g}")

    def restricted(self, a: float, b: float) -> "PsiMap":
        return PsiMap(self._psi, self._dpsi, a, b, name=self.name)

    def __repr__(self):
        return f"PsiMap({self.name}, [{self.a:g}, {self.b:g}])"


@dataclass(frozen=True)
class Order:
    """Fractional order alpha with n = floor(alpha) + 1 (n = alpha when integer)."""
    alpha: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0.0):
            raise DomainError(f"order must be a positive real, got {self.alpha}")

    @property
    def is_integer(self) -> bool:
        return float(self.alpha).is_integer()

    @property
    def n(self) -> int:
        if self.is_integer:
            return int(self.alpha)
        return int(math.floor(self.alpha)) + 1

    def require_unit_interval(self, what: str):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"{what} requires an order in (0, 1), got {self.alpha}")


def as_order(alpha: Union[Order, float]) -> Order:
    return alpha if isinstance(alpha, Order) else Order(float(alpha))


@dataclass(frozen=True, eq=False)
class Path:
    """
    A trajectory x(t).

    Either a callable (with optional analytic psi-derivatives) or grid samples,
    or both. dx_psi is (1/psi') dx/dt; higher_dx_psi[k-2] is the k-fold iterate.
    """
    x: Optional[Callable] = None
    dx_psi: Optional[Callable] = None
    higher_dx_psi: Tuple[Callable, ...] = ()
    samples: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        if self.x is None and self.samples is None:
            raise ValidationError("Path needs a callable or samples")
        if self.x is not None:
            object.__setattr__(self, "x", vectorize_callable(self.x))
        if self.dx_psi is not None:
            object.__setattr__(self, "dx_psi", vectorize_callable(self.dx_psi))
        object.__setattr__(self, "higher_dx_psi",
                           tuple(vectorize_callable(f) for f in self.higher_dx_psi))
        if self.samples is not None:
            nodes = np.asarray(self.samples[0], dtype=float)
            values = np.asarray(self.samples[1], dtype=float)
            if nodes.ndim != 1 or nodes.shape != values.shape or nodes.size < 2:
                raise ValidationError("Path samples must be two 1-D arrays of equal length >= 2")
            if np.any(np.diff(nodes) <= 0.0):
                raise ValidationError("Path sample nodes must be strictly increasing")
            object.__setattr__(self, "samples", (nodes, values))
            if self.x is not None:
                gap = np.max(np.abs(self.x(nodes) - values))
                if gap > SAMPLE_AGREEMENT_TOL * max(1.0, np.max(np.abs(values))):
                    raise ValidationError(f"Path samples disagree with x by {gap:.3e}")

    @classmethod
    def from_samples(cls, nodes: Sequence[float], values: Sequence[float]) -> "Path":
        return cls(samples=(np.asarray(nodes, dtype=float), np.asarray(values, dtype=float)))

    @classmethod
    def constant(cls, c: float) -> "Path":
        zero = lambda t: 0.0 * np.asarray(t, dtype=float)
        return cls(x=lambda t: c + 0.0 * np.asarray(t, dtype=float), dx_psi=zero,
                   higher_dx_psi=(zero, zero, zero))

    def __call__(self, t: ArrayLike) -> ArrayLike:
        if self.x is not None:
            return _to_output(self.x(t))
        nodes, values = self.samples
        return _to_output(np.interp(np.asarray(t, dtype=float), nodes, values))

    @property
    def is_sampled_only(self) -> bool:
        return self.x is None

    def has_derivative(self, k: int) -> bool:
        """True when the k-th psi-derivative is analytic (not synthesized)."""
        if k == 0:
            return True
        if k == 1:
            return self.dx_psi is not None
        return len(self.higher_dx_psi) >= k - 1

    def psi_derivative(self, t: ArrayLike, psi: PsiMap, k: int = 1) -> ArrayLike:
        """
        k-th iterate of (1/psi') d/dt applied to x.

        The first derivative is synthesized by central differences with step
        psi.fd_step() (one-sided at the ends of [a, b]) when not supplied.

        Raises:
            MissingDerivativeError: k >= 2 and no analytic derivative of that order
        """
        if k == 0:
            return self(t)
        if k == 1 and self.dx_psi is not None:
            return _to_output(self.dx_psi(t))
        if k >= 2:
            if len(self.higher_dx_psi) < k - 1:
                raise MissingDerivativeError(f"path has no psi-derivative of order {k}")
            return _to_output(self.higher_dx_psi[k - 2](t))
        t = np.asarray(t, dtype=float)
        h = psi.fd_step()
        hi = np.minimum(t + h, psi.b)
        lo = np.maximum(t - h, psi.a)
        slope = (np.asarray(self(hi)) - np.asarray(self(lo))) / (hi - lo)
        return _to_output(slope / psi._dpsi(t))

    def scaled(self, c: float) -> "Path":
        return _combine(c, self, 0.0, None)

    def __add__(self, other: "Path") -> "Path":
        return _combine(1.0, self, 1.0, other)

    def __sub__(self, other: "Path") -> "Path":
        return _combine(1.0, self, -1.0, other)

    def __rmul__(self, c: float) -> "Path":
        return self.scaled(float(c))


def _combine(c1: float, p1: Path, c2: float, p2: Optional[Path]) -> Path:
    if p2 is None:
        dx = (lambda t: c1 * p1.dx_psi(t)) if p1.dx_psi is not None else None
        higher = tuple((lambda f: (lambda t: c1 * f(t)))(f) for f in p1.higher_dx_psi)
        return Path(x=lambda t: c1 * np.asarray(p1(t)), dx_psi=dx, higher_dx_psi=higher)
    dx = None
    if p1.dx_psi is not None and p2.dx_psi is not None:
        dx = lambda t: c1 * p1.dx_psi(t) + c2 * p2.dx_psi(t)
    depth = min(len(p1.higher_dx_psi), len(p2.higher_dx_psi))
    higher = tuple((lambda f, g: (lambda t: c1 * f(t) + c2 * g(t)))(p1.higher_dx_psi[i], p2.higher_dx_psi[i])
                   for i in range(depth))
    return Path(x=lambda t: c1 * np.asarray(p1(t)) + c2 * np.asarray(p2(t)), dx_psi=dx,
                higher_dx_psi=higher)


class GridScheme(str, Enum):
    UNIFORM_IN_T = "uniform-in-t"
    UNIFORM_IN_PSI = "uniform-in-psi"


@dataclass(frozen=True, eq=False)
class QuadGrid:
    """Strictly increasing quadrature nodes t_0 < ... < t_N with their psi-images."""
    nodes: np.ndarray
    psi: PsiMap
    scheme: GridScheme = GridScheme.UNIFORM_IN_PSI
    psi_values: Optional[np.ndarray] = None
    psi_nodes: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise GridError("grid needs at least two nodes")
        if np.any(np.diff(nodes) <= 0.0):
            raise GridError("grid nodes must be strictly increasing")
        if not (self.psi.contains(nodes[0]) and self.psi.contains(nodes[-1])):
            raise GridError(f"grid [{nodes[0]}, {nodes[-1]}] leaves the psi domain "
                            f"[{self.psi.a}, {self.psi.b}]")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "scheme", GridScheme(self.scheme))
        if self.psi_values is not None:
            u = np.asarray(self.psi_values, dtype=float)
        else:
            u = np.asarray(self.psi._psi(nodes), dtype=float)
        object.__setattr__(self, "psi_nodes", u)

    @property
    def N(self) -> int:
        """Number of cells."""
        return self.nodes.size - 1

    @property
    def lo(self) -> float:
        return float(self.nodes[0])

    @property
    def hi(self) -> float:
        return float(self.nodes[-1])

    @classmethod
    def uniform_in_psi(cls, psi: PsiMap, N: int = DEFAULT_GRID_POINTS,
                       lo: Optional[float] = None, hi: Optional[float] = None) -> "QuadGrid":
        lo = psi.a if lo is None else float(lo)
        hi = psi.b if hi is None else float(hi)
        _check_cells(N)
        u = np.linspace(float(psi(lo)), float(psi(hi)), N + 1)
        t = np.asarray(psi.inverse(u), dtype=float)
        t[0], t[-1] = lo, hi
        return cls(t, psi, GridScheme.UNIFORM_IN_PSI, psi_values=u)

    @classmethod
    def uniform_in_t(cls, psi: PsiMap, N: int = DEFAULT_GRID_POINTS,
                     lo: Optional[float] = None, hi: Optional[float] = None) -> "QuadGrid":
        lo = psi.a if lo is None else float(lo)
        hi = psi.b if hi is None else float(hi)
        _check_cells(N)
        return cls(np.linspace(lo, hi, N + 1), psi, GridScheme.UNIFORM_IN_T)

    @classmethod
    def build(cls, psi: PsiMap, N: int = DEFAULT_GRID_POINTS,
              scheme: Union[GridScheme, str] = GridScheme.UNIFORM_IN_PSI,
              lo: Optional[float] = None, hi: Optional[float] = None) -> "QuadGrid":
        if GridScheme(scheme) is GridScheme.UNIFORM_IN_T:
            return cls.uniform_in_t(psi, N, lo, hi)
        return cls.uniform_in_psi(psi, N, lo, hi)

    def segment(self, lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        Nodes spanning exactly [lo, hi]: the endpoints plus the grid nodes between them.

        Returns:
            tuple: (t nodes, psi images)

        Raises:
            GridError: [lo, hi] not covered by the grid
        """
        lo, hi = float(lo), float(hi)
        width = self.hi - self.lo
        tol = 1e-12 * max(1.0, width)
        if lo < self.lo - tol or hi > self.hi + tol:
            raise GridError(f"grid [{self.lo}, {self.hi}] does not span [{lo}, {hi}]")
        if hi < lo:
            raise GridError(f"empty segment [{lo}, {hi}]")
        snap = SNAP_FRACTION * width / self.N

        def image(t):
            idx = np.searchsorted(self.nodes, t)
            for j in (idx - 1, idx):
                if 0 <= j <= self.N and abs(self.nodes[j] - t) <= tol:
                    return float(self.nodes[j]), float(self.psi_nodes[j])
            return t, float(self.psi(t))

        t_lo, u_lo = image(lo)
        if hi - lo <= tol:
            return np.array([t_lo]), np.array([u_lo])
        t_hi, u_hi = image(hi)
        inside = (self.nodes > lo + snap) & (self.nodes < hi - snap)
        ts = np.concatenate(([t_lo], self.nodes[inside], [t_hi]))
        us = np.concatenate(([u_lo], self.psi_nodes[inside], [u_hi]))
        return ts, us

    def meta(self) -> dict:
        return {"N": self.N, "scheme": self.scheme.value, "h_fd": self.psi.fd_step(),
                "lo": self.lo, "hi": self.hi}


def _check_cells(N: int):
    if int(N) != N or N < 1:
        raise GridError(f"grid needs a positive integer number of cells, got {N}")


# ---------------------------------------------------------------------------
# Product-integration weights

def left_weights(u: np.ndarray, gam: float, end: Optional[float] = None) -> np.ndarray:
    """
    Weights w with sum(w * g) = (1/Gamma(gam)) * int_{u_0}^{u_m} (end - s)^(gam-1) g(s) ds
    for g piecewise linear on the nodes u. end defaults to u_m and must not lie below it.
    """
    u = np.asarray(u, dtype=float)
    w = np.zeros(u.size)
    if u.size < 2:
        return w
    end = u[-1] if end is None else float(end)
    A = end - u[:-1]
    B = end - u[1:]
    h = u[1:] - u[:-1]
    P = (A ** gam - B ** gam) / gam
    R = (A ** (gam + 1.0) - B ** (gam + 1.0)) / (gam + 1.0)
    Q = (A * P - R) / h
    w[1:] += Q
    w[:-1] += P - Q
    return w / gamma_fn(gam)


def right_weights(u: np.ndarray, gam: float) -> np.ndarray:
    """Mirror of left_weights: kernel (s - u_0)^(gam-1) over [u_0, u_m]."""
    u = np.asarray(u, dtype=float)
    return left_weights(-u[::-1], gam)[::-1]


def left_slope_weights(u: np.ndarray, gam: float) -> np.ndarray:
    """Per-cell weights for a piecewise-constant g: int over cell k of (u_m - s)^(gam-1) / Gamma(gam)."""
    u = np.asarray(u, dtype=float)
    end = u[-1]
    return ((end - u[:-1]) ** gam - (end - u[1:]) ** gam) / gamma_fn(gam + 1.0)


def right_slope_weights(u: np.ndarray, gam: float) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    start = u[0]
    return ((u[1:] - start) ** gam - (u[:-1] - start) ** gam) / gamma_fn(gam + 1.0)


# ---------------------------------------------------------------------------
# Sampling helpers

def sample(x: Source, ts: np.ndarray) -> np.ndarray:
    """Values of a path, a callable or a pre-sampled array at the segment nodes."""
    if isinstance(x, Path):
        return np.asarray(x(ts), dtype=float) * np.ones_like(ts)
    if callable(x):
        return np.asarray(vectorize_callable(x)(ts), dtype=float)
    values = np.asarray(x, dtype=float)
    if values.shape != ts.shape:
        raise GridError(f"sampled values ({values.size}) do not match segment nodes ({ts.size})")
    return values


def _gradient(values: np.ndarray, us: np.ndarray) -> np.ndarray:
    if values.size < 2:
        return np.zeros_like(values)
    return np.gradient(values, us, edge_order=2 if values.size > 2 else 1)


def derivative_samples(x: Source, ts: np.ndarray, us: np.ndarray, psi: PsiMap, k: int) -> Tuple[np.ndarray, bool]:
    """
    k-th psi-derivative of x on the segment.

    Returns:
        tuple: (values, analytic flag). Non-analytic values come from repeated
        second-order differences in u.
    """
    if isinstance(x, Path) and x.has_derivative(k):
        return np.asarray(x.psi_derivative(ts, psi, k), dtype=float) * np.ones_like(ts), True
    values = sample(x, ts)
    for _ in range(k):
        values = _gradient(values, us)
    return values, False


def _check_point(psi: PsiMap, t: float, lo: float, hi: float, what: str):
    if not (psi.contains(lo) and psi.contains(hi)):
        raise DomainError(f"{what}: interval [{lo}, {hi}] leaves [{psi.a}, {psi.b}]")
    tol = 1e-12 * max(1.0, psi.b - psi.a)
    if not (lo - tol <= t <= hi + tol):
        raise DomainError(f"{what}: t={t} outside [{lo}, {hi}]")


def _run_rows(fn: Callable[[int], float], count: int, workers: Optional[int]) -> np.ndarray:
    workers = worker_count() if workers is None else max(1, int(workers))
    if workers <= 1 or count < 64:
        return np.array([fn(j) for j in range(count)], dtype=float)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.array(list(pool.map(fn, range(count))), dtype=float)


# Left/right Caputo kernels on a segment whose last (left) or first (right) node is the target

def _caputo_left_on(x: Source, ts, us, psi, order: Order) -> Callable[[int], float]:
    n = order.n
    gam = n - order.alpha
    if _analytic(x, n):
        top, _ = derivative_samples(x, ts, us, psi, n)
        return lambda j: float(left_weights(us[:j + 1], gam) @ top[:j + 1]) if j else 0.0
    base, _ = derivative_samples(x, ts, us, psi, n - 1)
    slopes = np.diff(base) / np.diff(us)
    return lambda j: float(left_slope_weights(us[:j + 1], gam) @ slopes[:j]) if j else 0.0


def _caputo_right_on(x: Source, ts, us, psi, order: Order) -> Callable[[int], float]:
    n = order.n
    gam = n - order.alpha
    sign = -1.0 if n % 2 else 1.0
    last = us.size - 1
    if _analytic(x, n):
        top, _ = derivative_samples(x, ts, us, psi, n)
        return lambda j: sign * float(right_weights(us[j:], gam) @ top[j:]) if j < last else 0.0
    base, _ = derivative_samples(x, ts, us, psi, n - 1)
    slopes = np.diff(base) / np.diff(us)
    return lambda j: sign * float(right_slope_weights(us[j:], gam) @ slopes[j:]) if j < last else 0.0


def _analytic(x: Source, k: int) -> bool:
    return isinstance(x, Path) and x.has_derivative(k)


def _require_derivative_source(x: Source, order: Order, what: str):
    n = order.n
    if n >= 2 and isinstance(x, Path) and not x.is_sampled_only \
            and not (x.has_derivative(n) or x.has_derivative(n - 1)):
        raise MissingDerivativeError(
            f"{what}: order {order.alpha} needs the psi-derivative of order {n - 1} or {n}")


def _classical(x: Source, psi: PsiMap, t: float, n: int) -> float:
    if isinstance(x, Path):
        return float(x.psi_derivative(t, psi, n))
    if n == 1 and callable(x):
        return float(Path(x=x).psi_derivative(t, psi, 1))
    raise MissingDerivativeError(f"integer order {n} needs a Path with psi-derivatives")


# ---------------------------------------------------------------------------
# Point operators

def frac_integral_left(x: Source, alpha: Union[Order, float], psi: PsiMap, t: float,
                       grid: QuadGrid, start: Optional[float] = None) -> float:
    """
    Left psi-fractional integral I_{a+}^{alpha, psi} x (t).

    Args:
        x: Integrand path
        alpha: Order > 0
        psi: Kernel map
        t: Evaluation point in [a, b]
        grid: Quadrature grid covering [a, t]
        start: Lower limit (defaults to psi.a)

    Returns:
        float: Integral value, 0 at t = start
    """
    order = as_order(alpha)
    start = psi.a if start is None else float(start)
    _check_point(psi, t, start, psi.b, "frac_integral_left")
    ts, us = grid.segment(start, t)
    if ts.size < 2:
        return 0.0
    return float(left_weights(us, order.alpha) @ sample(x, ts))


def frac_integral_right(x: Source, alpha: Union[Order, float], psi: PsiMap, t: float,
                        grid: QuadGrid, end: Optional[float] = None) -> float:
    """Right psi-fractional integral I_{b-}^{alpha, psi} x (t); `end` replaces b."""
    order = as_order(alpha)
    end = psi.b if end is None else float(end)
    _check_point(psi, t, psi.a, end, "frac_integral_right")
    ts, us = grid.segment(t, end)
    if ts.size < 2:
        return 0.0
    return float(right_weights(us, order.alpha) @ sample(x, ts))


def caputo_left(x: Source, alpha: Union[Order, float], psi: PsiMap, t: float,
                grid: QuadGrid, start: Optional[float] = None) -> float:
    """
    Left psi-Caputo derivative: I_{a+}^{n-alpha} applied to ((1/psi') d/dt)^n x.

    Uses the analytic psi-derivative when the path carries one; otherwise
    integrates the cell slopes of x in u exactly against the kernel.
    Integer orders return the classical iterated derivative.
    """
    order = as_order(alpha)
    if order.is_integer:
        return _classical(x, psi, t, order.n)
    if order.n > 1:
        return caputo_left_highorder(x, order, psi, t, grid, start=start)
    start = psi.a if start is None else float(start)
    _check_point(psi, t, start, psi.b, "caputo_left")
    ts, us = grid.segment(start, t)
    return _caputo_left_on(x, ts, us, psi, order)(ts.size - 1)


def caputo_left_highorder(x: Source, alpha: Union[Order, float], psi: PsiMap, t: float,
                          grid: QuadGrid, start: Optional[float] = None) -> float:
    """Left psi-Caputo derivative of order alpha in (n-1, n), n >= 1."""
    order = as_order(alpha)
    if order.is_integer:
        return _classical(x, psi, t, order.n)
    _require_derivative_source(x, order, "caputo_left_highorder")
    start = psi.a if start is None else float(start)
    _check_point(psi, t, start, psi.b, "caputo_left_highorder")
    ts, us = grid.segment(start, t)
    return _caputo_left_on(x, ts, us, psi, order)(ts.size - 1)


def caputo_right(x: Source, alpha: Union[Order, float], psi: PsiMap, t: float,
                 grid: QuadGrid, end: Optional[float] = None) -> float:
    """Right psi-Caputo derivative: I_{b-}^{n-alpha} applied to (-(1/psi') d/dt)^n x."""
    order = as_order(alpha)
    if order.is_integer:
        sign = -1.0 if order.n % 2 else 1.0
        return sign * _classical(x, psi, t, order.n)
    _require_derivative_source(x, order, "caputo_right")
    end = psi.b if end is None else float(end)
    _check_point(psi, t, psi.a, end, "caputo_right")
    ts, us = grid.segment(t, end)
    return _caputo_right_on(x, ts, us, psi, order)(0)


def singular_guard(psi: PsiMap, T: float) -> float:
    return (float(psi(T)) - psi.psi_a) * SINGULAR_GUARD


def _boundary_terms(f: Source, order: Order, psi: PsiMap, T: float,
                    ts: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Terms (-(1/psi') d/dt)^k f (T) (psi(T)-psi(t))^(k-alpha) / Gamma(k+1-alpha), k < n."""
    gaps = us[-1] - us
    out = np.zeros_like(us)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(order.n):
            if isinstance(f, Path) and f.has_derivative(k):
                dk = float(f.psi_derivative(T, psi, k))
            else:
                dk = float(derivative_samples(f, ts, us, psi, k)[0][-1])
            if k % 2:
                dk = -dk
            out += dk * gaps ** (k - order.alpha) * rgamma(k + 1.0 - order.alpha)
    return out


def rl_right(f: Source, alpha: Union[Order, float], psi: PsiMap, T: float, t: float,
             grid: QuadGrid, method: str = "caputo") -> float:
    """
    Right psi-Riemann-Liouville derivative D_{T-}^{alpha, psi} f (t).

    method="caputo" uses the right Caputo derivative plus the boundary term
    f(T) (psi(T)-psi(t))^(-alpha) / Gamma(1-alpha). method="direct"
    differentiates I_{T-}^{1-alpha} f by central differences.

    Raises:
        SingularityError: psi(T) - psi(t) below the singular guard
    """
    order = as_order(alpha)
    order.require_unit_interval("rl_right")
    if not psi.contains(T):
        raise DomainError(f"rl_right: T={T} outside [{psi.a}, {psi.b}]")
    _check_point(psi, t, psi.a, T, "rl_right")
    gap = float(psi(T)) - float(psi(t))
    guard = singular_guard(psi, T)
    if gap < guard:
        raise SingularityError(f"rl_right: psi(T)-psi(t)={gap:.3e} below singular guard {guard:.3e}")

    if method == "direct":
        h = min(psi.fd_step(), 0.5 * (T - t))
        lo = max(t - h, psi.a)
        hi = t + h
        i_hi = frac_integral_right(f, 1.0 - order.alpha, psi, hi, grid, end=T)
        i_lo = frac_integral_right(f, 1.0 - order.alpha, psi, lo, grid, end=T)
        return -(i_hi - i_lo) / (hi - lo) / float(psi.derivative(t))
    if method != "caputo":
        raise ValidationError(f"rl_right: unknown method {method!r}")

    ts, us = grid.segment(t, T)
    value = _caputo_right_on(f, ts, us, psi, order)(0)
    f_T = float(f(T)) if (isinstance(f, Path) or callable(f)) else float(sample(f, ts)[-1])
    return value + f_T * gap ** (-order.alpha) * rgamma(1.0 - order.alpha)


# ---------------------------------------------------------------------------
# Profiles: operator values at every node of a segment

def left_integral_profile(x: Source, alpha: Union[Order, float], psi: PsiMap, grid: QuadGrid,
                          start: Optional[float] = None, end: Optional[float] = None,
                          workers: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """I_{start+}^{alpha} x at every node of [start, end]."""
    order = as_order(alpha)
    ts, us = grid.segment(psi.a if start is None else start, psi.b if end is None else end)
    g = sample(x, ts)
    row = lambda j: float(left_weights(us[:j + 1], order.alpha) @ g[:j + 1]) if j else 0.0
    return ts, _run_rows(row, ts.size, workers)


def right_integral_profile(x: Source, alpha: Union[Order, float], psi: PsiMap, grid: QuadGrid,
                           start: Optional[float] = None, end: Optional[float] = None,
                           workers: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """I_{end-}^{alpha} x at every node of [start, end]."""
    order = as_order(alpha)
    ts, us = grid.segment(psi.a if start is None else start, psi.b if end is None else end)
    g = sample(x, ts)
    last = ts.size - 1
    row = lambda j: float(right_weights(us[j:], order.alpha) @ g[j:]) if j < last else 0.0
    return ts, _run_rows(row, ts.size, workers)


def caputo_left_profile(x: Source, alpha: Union[Order, float], psi: PsiMap, grid: QuadGrid,
                        start: Optional[float] = None, end: Optional[float] = None,
                        workers: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Left Caputo derivative at every node of [start, end]."""
    order = as_order(alpha)
    ts, us = grid.segment(psi.a if start is None else start, psi.b if end is None else end)
    if order.is_integer:
        if isinstance(x, Path) and not x.is_sampled_only:
            return ts, np.asarray(x.psi_derivative(ts, psi, order.n), dtype=float) * np.ones_like(ts)
        return ts, derivative_samples(x, ts, us, psi, order.n)[0]
    _require_derivative_source(x, order, "caputo_left_profile")
    return ts, _run_rows(_caputo_left_on(x, ts, us, psi, order), ts.size, workers)


def caputo_right_profile(f: Source, alpha: Union[Order, float], psi: PsiMap, grid: QuadGrid,
                         start: Optional[float] = None, end: Optional[float] = None,
                         workers: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Right Caputo derivative (upper limit `end`) at every node of [start, end]."""
    order = as_order(alpha)
    ts, us = grid.segment(psi.a if start is None else start, psi.b if end is None else end)
    if order.is_integer:
        values, _ = derivative_samples(f, ts, us, psi, order.n)
        return ts, values if order.n % 2 == 0 else -values
    _require_derivative_source(f, order, "caputo_right_profile")
    return ts, _run_rows(_caputo_right_on(f, ts, us, psi, order), ts.size, workers)


def rl_right_profile(f: Source, alpha: Union[Order, float], psi: PsiMap, grid: QuadGrid,
                     start: Optional[float] = None, end: Optional[float] = None,
                     workers: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Right Riemann-Liouville derivative D_{end-}^{alpha} f at every node of [start, end].

    Orders in (n-1, n) add the boundary terms for k < n. Nodes inside the
    singular guard of `end` are NaN.
    """
    order = as_order(alpha)
    end = psi.b if end is None else float(end)
    ts, us = grid.segment(psi.a if start is None else start, end)
    if order.is_integer:
        return caputo_right_profile(f, order, psi, grid, start=ts[0], end=end, workers=workers)
    _, caputo = caputo_right_profile(f, order, psi, grid, start=ts[0], end=end, workers=workers)
    values = caputo + _boundary_terms(f, order, psi, end, ts, us)
    guard = (us[-1] - psi.psi_a) * SINGULAR_GUARD
    values[(us[-1] - us) < guard] = np.nan
    return ts, values


# ---------------------------------------------------------------------------
# Identity residuals

def composition_residual_left(x: Path, alpha: Union[Order, float], psi: PsiMap, grid: QuadGrid,
                              workers: Optional[int] = None) -> float:
    """
    max_t |I^alpha (C-D^alpha x)(t) - [x(t) - sum_{k<n} x^[k](a) (psi(t)-psi(a))^k / k!]|
    over the grid nodes.
    """
    order = as_order(alpha)
    ts, derivative = caputo_left_profile(x, order, psi, grid, workers=workers)
    _, us = grid.segment(psi.a, psi.b)
    _, recovered = left_integral_profile(derivative, order, psi, grid, workers=workers)
    taylor = np.zeros_like(ts)
    offset = us - psi.psi_a
    for k in range(order.n):
        taylor += float(x.psi_derivative(psi.a, psi, k)) * offset ** k / math.factorial(k)
    residual = recovered - (np.asarray(x(ts), dtype=float) - taylor)
    return float(np.max(np.abs(residual)))


def integration_by_parts_residual(x: Path, y: Path, alpha: Union[Order, float], psi: PsiMap,
                                  grid: QuadGrid, workers: Optional[int] = None) -> float:
    """
    |int x C-D_{a+} y dt - int D_{b-}(x/psi') y psi' dt - [I_{b-}^{1-alpha}(x/psi') y]_a^b|.

    The Riemann-Liouville factor is split into its Caputo part (integrated
    by the trapezoid rule in u) and its boundary part, whose kernel integral
    against y is the left integral of y at b.
    """
    from scipy.integrate import trapezoid

    order = as_order(alpha)
    order.require_unit_interval("integration_by_parts_residual")
    ts, us = grid.segment(psi.a, psi.b)
    x_vals = sample(x, ts)
    y_vals = sample(y, ts)
    dpsi = np.asarray(psi.derivative(ts), dtype=float)
    f_vals = x_vals / dpsi

    _, cy = caputo_left_profile(y, order, psi, grid, workers=workers)
    lhs = trapezoid(x_vals * cy, ts)

    _, cf = caputo_right_profile(f_vals, order, psi, grid, workers=workers)
    boundary_mass = float(left_weights(us, 1.0 - order.alpha) @ y_vals)
    rhs_integral = trapezoid(cf * y_vals, us) + f_vals[-1] * boundary_mass

    i_a = float(right_weights(us, 1.0 - order.alpha) @ f_vals)
    # I_{b-} vanishes at b
    bracket = -i_a * y_vals[0]
    return float(abs(lhs - rhs_integral - bracket))

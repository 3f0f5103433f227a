#!/usr/bin/env python3
"""
Built-in worked problems.
Closed-form extremals for the quadratic tracking, isoperimetric and
optimal-order examples, plus the linear counterexample for sufficiency.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
from scipy import integrate, optimize

from core.errors import ValidationError
from core.frac_ops import Path, PsiMap
from core.special_functions import gamma
from core.variational import LagrangianDef, ProblemKind, ProblemSpec

logger = logging.getLogger(__name__)

# Upper ends of the interval per kernel, wide enough for the optimal-order terminal times
ORDER_INTERVAL = {"psi1": 8.0, "psi2": 60.0}
ORDER_LEVEL = 20.0


def psi_map(name: str, a: float = 0.0, b: float = 2.0) -> PsiMap:
    """psi1(t) = t or psi2(t) = sqrt(t + 1) on [a, b]."""
    if name == "psi1":
        return PsiMap(lambda t: np.asarray(t, dtype=float) * 1.0,
                      lambda t: np.ones_like(np.asarray(t, dtype=float)), a, b, name="t")
    if name == "psi2":
        return PsiMap(lambda t: np.sqrt(np.asarray(t, dtype=float) + 1.0),
                      lambda t: 0.5 / np.sqrt(np.asarray(t, dtype=float) + 1.0), a, b,
                      name="sqrt(t+1)")
    raise ValidationError(f"unknown kernel {name!r}; expected psi1 or psi2")


def _gap(psi: PsiMap) -> Callable[[np.ndarray], np.ndarray]:
    return lambda t: np.maximum(np.asarray(psi(t), dtype=float) - psi.psi_a, 0.0)


def power_path(psi: PsiMap, power: float, scale: float = 1.0) -> Path:
    """scale * (psi(t) - psi(a))^power with its first psi-derivative."""
    u = _gap(psi)
    return Path(x=lambda t: scale * u(t) ** power,
                dx_psi=lambda t: scale * power * u(t) ** (power - 1.0))


@dataclass
class ReferenceProblem:
    name: str
    problem: ProblemSpec
    candidate: Path
    T_star: float
    J_star: Optional[float]
    lam: Optional[float] = None


def example1(psi_name: str = "psi1", alpha: float = 0.5, b: float = 2.0) -> ReferenceProblem:
    """L = (d - u^(1-alpha)/Gamma(2-alpha))^2 + t^2 - 1 with x* = u, T* = 1, J* = -2/3."""
    psi = psi_map(psi_name, 0.0, b)
    u = _gap(psi)
    c = 1.0 / gamma(2.0 - alpha)
    g = lambda t: c * u(t) ** (1.0 - alpha)
    L = LagrangianDef(
        lambda t, x, d: (d - g(t)) ** 2 + t ** 2 - 1.0,
        partials={2: lambda t, x, d: 0.0 * d, 3: lambda t, x, d: 2.0 * (d - g(t))},
        second_partials={(3, 3): lambda t, x, d: 2.0 + 0.0 * d},
        name="example1")
    problem = ProblemSpec(kind=ProblemKind.FUNDAMENTAL, psi=psi, L=L, alpha=alpha, x_a=0.0,
                          name="example1")
    return ReferenceProblem("example1", problem, power_path(psi, 1.0), T_star=1.0, J_star=-2.0 / 3.0)


def example2(psi_name: str = "psi1", alpha: float = 0.5, b: float = 1.0) -> ReferenceProblem:
    """
    L = d^2 + g^2 + t^2 - 1, M = d g, Phi(T) = int_0^T g^2 dt with g = u^(1-alpha)/Gamma(2-alpha).

    With lam = -2 the augmented Lagrangian is (d - g)^2 + t^2 - 1; x* = u and
    T* solves T^2 - 1 = -2 g(T)^2.
    """
    psi = psi_map(psi_name, 0.0, b)
    u = _gap(psi)
    c = 1.0 / gamma(2.0 - alpha)
    g = lambda t: c * u(t) ** (1.0 - alpha)
    L = LagrangianDef(
        lambda t, x, d: d ** 2 + g(t) ** 2 + t ** 2 - 1.0,
        partials={2: lambda t, x, d: 0.0 * d, 3: lambda t, x, d: 2.0 * d},
        second_partials={(3, 3): lambda t, x, d: 2.0 + 0.0 * d},
        name="example2")
    M = LagrangianDef(
        lambda t, x, d: d * g(t),
        partials={2: lambda t, x, d: 0.0 * d, 3: lambda t, x, d: g(t) + 0.0 * d},
        second_partials={(3, 3): lambda t, x, d: 0.0 * d},
        name="constraint")
    Phi = lambda T: integrate.quad(lambda s: float(g(s)) ** 2, psi.a, float(T),
                                   epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    dPhi = lambda T: float(g(T)) ** 2
    lam = -2.0
    problem = ProblemSpec(kind=ProblemKind.ISOPERIMETRIC, psi=psi, L=L, alpha=alpha, x_a=0.0,
                          M=M, Phi=Phi, dPhi=dPhi, lam=lam, name="example2")
    T_star = optimize.brentq(lambda T: T ** 2 - 1.0 + 2.0 * dPhi(T), psi.a + 1e-12, b, xtol=1e-15)
    J_star = integrate.quad(lambda s: 2.0 * float(g(s)) ** 2 + s ** 2 - 1.0, psi.a, T_star,
                            epsabs=1e-13, epsrel=1e-12)[0]
    return ReferenceProblem("example2", problem, power_path(psi, 1.0), T_star=float(T_star),
                            J_star=J_star, lam=lam)


def example3_lagrangian(psi: PsiMap, alpha: float, level: float = ORDER_LEVEL) -> LagrangianDef:
    """L_alpha = u^alpha d^2 / (2 Gamma(alpha+2)) - u^(alpha+1) d + level Gamma(alpha+2)."""
    u = _gap(psi)
    g2 = gamma(alpha + 2.0)
    return LagrangianDef(
        lambda t, x, d: u(t) ** alpha * d ** 2 / (2.0 * g2) - u(t) ** (alpha + 1.0) * d + level * g2,
        partials={2: lambda t, x, d: 0.0 * d,
                  3: lambda t, x, d: u(t) ** alpha * d / g2 - u(t) ** (alpha + 1.0)},
        second_partials={(3, 3): lambda t, x, d: u(t) ** alpha / g2 + 0.0 * d},
        name=f"example3[alpha={alpha:g}]")


def example3_candidate(psi: PsiMap, alpha: float) -> Path:
    return power_path(psi, alpha + 1.0)


def example3(psi_name: str = "psi1", alpha: float = 0.5) -> ReferenceProblem:
    """
    Order-dependent family with x* = u^(alpha+1) and terminal relation
    u(T*)^(alpha+2) = 2 * level.
    """
    psi = psi_map(psi_name, 0.0, ORDER_INTERVAL[psi_name])
    problem = ProblemSpec(kind=ProblemKind.OPTIMAL_ORDER, psi=psi,
                          L=example3_lagrangian(psi, alpha), alpha=alpha, x_a=0.0,
                          lagrangian_family=lambda a_: example3_lagrangian(psi, a_),
                          level=ORDER_LEVEL, name="example3")
    T_star = float(psi.inverse(psi.psi_a + (2.0 * ORDER_LEVEL) ** (1.0 / (alpha + 2.0))))
    return ReferenceProblem("example3", problem, example3_candidate(psi, alpha), T_star=T_star,
                            J_star=None)


def counterexample(alpha: float = 0.5, b: float = 2.0) -> ReferenceProblem:
    """L = 1 - t: J(T) = T - T^2/2 peaks at T* = 1, so perturbing T lowers J."""
    psi = psi_map("psi1", 0.0, b)
    L = LagrangianDef(
        lambda t, x, d: 1.0 - t + 0.0 * d,
        partials={2: lambda t, x, d: 0.0 * d, 3: lambda t, x, d: 0.0 * d},
        second_partials={(3, 3): lambda t, x, d: 0.0 * d},
        name="counterexample")
    problem = ProblemSpec(kind=ProblemKind.FUNDAMENTAL, psi=psi, L=L, alpha=alpha, x_a=0.0,
                          name="counterexample")
    return ReferenceProblem("counterexample", problem, Path.constant(0.0), T_star=1.0, J_star=0.5)


BUILDERS: Dict[str, Callable[..., ReferenceProblem]] = {
    "example1": example1,
    "example2": example2,
    "example3": example3,
    "counterexample": lambda psi_name="psi1", **kw: counterexample(**kw),
}


def build(name: str, psi_name: str = "psi1", **kwargs) -> ReferenceProblem:
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise ValidationError(f"unknown reference problem {name!r}; "
                              f"expected one of {', '.join(sorted(BUILDERS))}") from None
    logger.debug("building reference problem %s (%s)", name, psi_name)
    return builder(psi_name=psi_name, **kwargs)

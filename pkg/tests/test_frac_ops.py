#!/usr/bin/env python3
"""
Tests for the psi-fractional integrals and derivatives.
"""

import math

import numpy as np
import pytest
from scipy import special

from conftest import make_psi1, make_psi2
from core.errors import DomainError, GridError, MissingDerivativeError, SingularityError, ValidationError
from core.frac_ops import (Order, Path, PsiMap, QuadGrid, caputo_left, caputo_left_highorder,
                           caputo_left_profile, caputo_right, composition_residual_left,
                           frac_integral_left, frac_integral_right, integration_by_parts_residual,
                           left_weights, right_weights, rl_right, rl_right_profile)
from core.special_functions import mittag_leffler_array


def power(psi, beta, scale=1.0):
    """scale * (psi - psi(a))^beta with its psi-derivatives."""
    u = lambda t: np.maximum(np.asarray(psi(t), dtype=float) - psi.psi_a, 0.0)
    return Path(x=lambda t: scale * u(t) ** beta,
                dx_psi=lambda t: scale * beta * u(t) ** (beta - 1.0),
                higher_dx_psi=(lambda t: scale * beta * (beta - 1.0) * u(t) ** (beta - 2.0),))


def reverse_power(psi, beta, end):
    """(psi(end) - psi)^beta with its psi-derivative."""
    u_end = float(psi(end))
    r = lambda t: np.maximum(u_end - np.asarray(psi(t), dtype=float), 0.0)
    return Path(x=lambda t: r(t) ** beta, dx_psi=lambda t: -beta * r(t) ** (beta - 1.0))


class TestPsiMap:
    def test_rejects_reversed_interval(self):
        with pytest.raises(DomainError):
            make_psi1(a=1.0, b=0.0)

    def test_rejects_decreasing_map(self):
        with pytest.raises(DomainError):
            PsiMap(lambda t: -t, lambda t: -1.0 + 0.0 * t, 0.0, 1.0)

    def test_inverse_round_trip(self, psi):
        ts = np.linspace(psi.a, psi.b, 17)
        np.testing.assert_allclose(psi.inverse(psi(ts)), ts, atol=1e-12)

    def test_inverse_outside_range(self, psi2):
        with pytest.raises(DomainError):
            psi2.inverse(psi2.psi_b + 1.0)

    def test_shifted_keeps_derivative(self, psi2):
        shifted = psi2.shifted(3.0)
        assert shifted(0.5) == pytest.approx(psi2(0.5) + 3.0)
        assert shifted.derivative(0.5) == pytest.approx(psi2.derivative(0.5))


class TestOrderAndPath:
    @pytest.mark.parametrize("alpha,n", [(0.3, 1), (1.0, 1), (1.5, 2), (2.0, 2), (2.7, 3)])
    def test_order_n(self, alpha, n):
        assert Order(alpha).n == n

    @pytest.mark.parametrize("alpha", [0.0, -1.0, float("nan")])
    def test_order_must_be_positive(self, alpha):
        with pytest.raises(DomainError):
            Order(alpha)

    def test_path_needs_a_source(self):
        with pytest.raises(ValidationError):
            Path()

    def test_samples_must_agree_with_callable(self):
        nodes = np.linspace(0.0, 1.0, 5)
        with pytest.raises(ValidationError):
            Path(x=lambda t: t, samples=(nodes, nodes + 1.0))

    def test_sampled_path_interpolates(self):
        p = Path.from_samples([0.0, 1.0], [0.0, 2.0])
        assert p(0.25) == pytest.approx(0.5)
        assert p.is_sampled_only

    def test_synthesized_first_derivative(self, psi2):
        p = Path(x=lambda t: np.sqrt(np.asarray(t) + 1.0) ** 2)
        # x = psi^2 so dx/dpsi = 2 psi
        assert p.psi_derivative(0.4, psi2) == pytest.approx(2.0 * psi2(0.4), rel=1e-8)

    def test_missing_higher_derivative(self, psi1):
        with pytest.raises(MissingDerivativeError):
            Path(x=lambda t: t).psi_derivative(0.5, psi1, k=2)

    def test_linear_combination(self, psi1):
        p = power(psi1, 2.0) - 2.0 * power(psi1, 1.0)
        assert p(0.5) == pytest.approx(0.25 - 1.0)
        assert p.psi_derivative(0.5, psi1) == pytest.approx(1.0 - 2.0)


class TestQuadGrid:
    def test_segment_has_exact_endpoints(self, psi2):
        grid = QuadGrid.uniform_in_psi(psi2, 64)
        ts, us = grid.segment(0.1234, 0.8765)
        assert ts[0] == 0.1234 and ts[-1] == 0.8765
        assert np.all(np.diff(ts) > 0)
        np.testing.assert_allclose(us, psi2(ts), rtol=1e-12)

    def test_segment_outside_grid(self, psi1):
        grid = QuadGrid.uniform_in_t(psi1, 16, lo=0.0, hi=0.5)
        with pytest.raises(GridError):
            grid.segment(0.0, 0.9)

    def test_uniform_in_psi_spacing(self, psi2):
        grid = QuadGrid.uniform_in_psi(psi2, 32)
        np.testing.assert_allclose(np.diff(grid.psi_nodes), psi2.span / 32, rtol=1e-10)

    @pytest.mark.parametrize("N", [0, -3, 2.5])
    def test_rejects_bad_cell_count(self, psi1, N):
        with pytest.raises(GridError):
            QuadGrid.uniform_in_t(psi1, N)

    def test_meta(self, psi1):
        meta = QuadGrid.build(psi1, 10, "uniform-in-t").meta()
        assert meta["N"] == 10 and meta["scheme"] == "uniform-in-t"


class TestWeights:
    @pytest.mark.parametrize("gam", [0.3, 0.5, 1.0, 1.7])
    def test_left_weights_integrate_linear_exactly(self, gam):
        u = np.sort(np.concatenate(([0.0, 1.0], np.random.default_rng(1).random(20))))
        g = 2.0 + 3.0 * u
        # int_0^1 (1-s)^(gam-1) (2 + 3 s) ds / Gamma(gam)
        expected = 5.0 / special.gamma(gam + 1.0) - 3.0 * gam / special.gamma(gam + 2.0)
        assert left_weights(u, gam) @ g == pytest.approx(expected, rel=1e-12)

    def test_right_weights_mirror_left(self):
        u = np.linspace(0.0, 1.0, 11)
        g = u ** 2
        assert right_weights(u, 0.4) @ g == pytest.approx(left_weights(u, 0.4) @ g[::-1], rel=1e-13)

    def test_weights_with_later_end(self):
        u = np.linspace(0.0, 1.0, 9)
        ones = np.ones_like(u)
        expected = (2.0 ** 0.5 - 1.0) / special.gamma(1.5)
        assert left_weights(u, 0.5, end=2.0) @ ones == pytest.approx(expected, rel=1e-13)


class TestPowerRules:
    @pytest.mark.parametrize("alpha", [0.25, 0.5, 0.75])
    @pytest.mark.parametrize("beta", [1.0, 2.0, 2.5])
    def test_left_integral(self, psi, alpha, beta):
        grid = QuadGrid.uniform_in_psi(psi, 1024)
        t = 0.8
        u = float(psi(t)) - psi.psi_a
        expected = special.gamma(beta + 1.0) / special.gamma(beta + alpha + 1.0) * u ** (beta + alpha)
        got = frac_integral_left(power(psi, beta), alpha, psi, t, grid)
        assert got == pytest.approx(expected, rel=1e-5)

    @pytest.mark.parametrize("alpha", [0.25, 0.5, 0.75])
    @pytest.mark.parametrize("beta", [1.0, 2.0, 2.5, 3.0])
    def test_left_caputo_with_analytic_derivative(self, psi, alpha, beta):
        grid = QuadGrid.uniform_in_psi(psi, 4096)
        t = 1.0
        u = float(psi(t)) - psi.psi_a
        expected = special.gamma(beta + 1.0) / special.gamma(beta + 1.0 - alpha) * u ** (beta - alpha)
        assert caputo_left(power(psi, beta), alpha, psi, t, grid) == pytest.approx(expected, rel=1e-3)

    @pytest.mark.parametrize("alpha", [0.25, 0.5, 0.75])
    @pytest.mark.parametrize("beta", [2.0, 2.5, 4.0])
    def test_left_caputo_from_values_only(self, psi, alpha, beta):
        grid = QuadGrid.uniform_in_psi(psi, 4096)
        p = power(psi, beta)
        values_only = Path(x=p.x)
        u = float(psi(1.0)) - psi.psi_a
        expected = special.gamma(beta + 1.0) / special.gamma(beta + 1.0 - alpha) * u ** (beta - alpha)
        assert caputo_left(values_only, alpha, psi, 1.0, grid) == pytest.approx(expected, rel=1e-3)

    def test_caputo_of_constant_is_zero(self, psi2):
        grid = QuadGrid.uniform_in_psi(psi2, 128)
        assert caputo_left(Path.constant(3.0), 0.5, psi2, 0.7, grid) == 0.0

    @pytest.mark.parametrize("alpha", [0.3, 0.6])
    def test_right_integral_and_caputo(self, psi, alpha):
        grid = QuadGrid.uniform_in_psi(psi, 2048)
        end, t, beta = 1.0, 0.3, 2.0
        r = float(psi(end)) - float(psi(t))
        x = reverse_power(psi, beta, end)
        expected_i = special.gamma(beta + 1.0) / special.gamma(beta + alpha + 1.0) * r ** (beta + alpha)
        expected_d = special.gamma(beta + 1.0) / special.gamma(beta + 1.0 - alpha) * r ** (beta - alpha)
        assert frac_integral_right(x, alpha, psi, t, grid) == pytest.approx(expected_i, rel=1e-5)
        assert caputo_right(x, alpha, psi, t, grid) == pytest.approx(expected_d, rel=1e-5)

    def test_integer_order_is_classical(self, psi2):
        grid = QuadGrid.uniform_in_psi(psi2, 64)
        p = power(psi2, 3.0)
        u = float(psi2(0.5)) - psi2.psi_a
        assert caputo_left(p, 1.0, psi2, 0.5, grid) == pytest.approx(3.0 * u ** 2)
        assert caputo_right(p, 1.0, psi2, 0.5, grid) == pytest.approx(-3.0 * u ** 2)

    def test_order_near_one_approaches_first_derivative(self, psi):
        grid = QuadGrid.uniform_in_psi(psi, 2048)
        x = Path(x=lambda t: np.sin(np.asarray(t, dtype=float)),
                 dx_psi=lambda t: np.cos(np.asarray(t, dtype=float)) / psi.derivative(t))
        t = 0.8
        expected = math.cos(t) / float(psi.derivative(t))
        assert caputo_left(x, 0.999, psi, t, grid) == pytest.approx(expected, rel=0.02)


class TestConvergence:
    def test_caputo_second_order_for_smooth_derivative(self, psi):
        alpha, beta = 0.5, 3.5
        u = float(psi(1.0)) - psi.psi_a
        expected = special.gamma(beta + 1.0) / special.gamma(beta + 1.0 - alpha) * u ** (beta - alpha)
        errors = []
        for N in (256, 512, 1024, 2048):
            grid = QuadGrid.uniform_in_psi(psi, N)
            errors.append(abs(caputo_left(power(psi, beta), alpha, psi, 1.0, grid) - expected))
        rates = [math.log2(errors[k] / errors[k + 1]) for k in range(len(errors) - 1)]
        assert min(rates) >= 1.5

    @pytest.mark.acceptance
    @pytest.mark.parametrize("alpha", [0.25, 0.5, 0.75])
    def test_mittag_leffler_eigenfunction(self, alpha):
        psi = make_psi2()
        lam = -1.0
        u = lambda t: np.maximum(np.asarray(psi(t), dtype=float) - psi.psi_a, 0.0)
        x = Path(x=lambda t: mittag_leffler_array(alpha, lam * u(t) ** alpha))
        grid = QuadGrid.uniform_in_psi(psi, 4096)
        got = caputo_left(x, alpha, psi, 1.0, grid)
        assert got == pytest.approx(lam * float(x(1.0)), rel=1e-3)


class TestHighOrder:
    @pytest.mark.parametrize("alpha", [1.3, 1.5, 1.8])
    def test_power_rule(self, psi, alpha):
        grid = QuadGrid.uniform_in_psi(psi, 2048)
        beta = 3.0
        p = power(psi, beta)
        u = float(psi(1.0)) - psi.psi_a
        expected = special.gamma(beta + 1.0) / special.gamma(beta + 1.0 - alpha) * u ** (beta - alpha)
        assert caputo_left_highorder(p, alpha, psi, 1.0, grid) == pytest.approx(expected, rel=1e-4)

    def test_missing_derivatives_rejected(self, psi1):
        grid = QuadGrid.uniform_in_psi(psi1, 64)
        with pytest.raises(MissingDerivativeError):
            caputo_left(Path(x=lambda t: np.asarray(t) ** 3), 1.5, psi1, 0.5, grid)

    def test_first_derivative_is_enough(self, psi1):
        grid = QuadGrid.uniform_in_psi(psi1, 2048)
        p = Path(x=lambda t: np.asarray(t) ** 3, dx_psi=lambda t: 3.0 * np.asarray(t) ** 2)
        expected = 6.0 / special.gamma(2.5)
        assert caputo_left(p, 1.5, psi1, 1.0, grid) == pytest.approx(expected, rel=1e-3)


class TestRightRiemannLiouville:
    def test_constant(self, psi):
        grid = QuadGrid.uniform_in_psi(psi, 512)
        T, t, alpha = 1.0, 0.4, 0.5
        gap = float(psi(T)) - float(psi(t))
        expected = gap ** (-alpha) / special.gamma(1.0 - alpha)
        assert rl_right(Path.constant(1.0), alpha, psi, T, t, grid) == pytest.approx(expected, rel=1e-12)

    def test_methods_agree(self, psi):
        grid = QuadGrid.uniform_in_psi(psi, 1024)
        T, t, alpha = 1.0, 0.37, 0.4
        u_T = float(psi(T))
        f = Path(x=lambda s: 1.0 + u_T - np.asarray(psi(s), dtype=float),
                 dx_psi=lambda s: -1.0 + 0.0 * np.asarray(s, dtype=float))
        via_caputo = rl_right(f, alpha, psi, T, t, grid, method="caputo")
        direct = rl_right(f, alpha, psi, T, t, grid, method="direct")
        assert direct == pytest.approx(via_caputo, rel=1e-6)

    @pytest.mark.parametrize("t", [0.1, 0.4, 0.8])
    def test_power_rule(self, psi, t):
        # f = (psi(T) - psi)^1.5, alpha = 0.5: Gamma(2.5) / Gamma(2) (psi(T) - psi(t))
        grid = QuadGrid.uniform_in_psi(psi, 2048)
        T = 1.0
        gap = float(psi(T)) - float(psi(t))
        expected = special.gamma(2.5) / special.gamma(2.0) * gap
        got = rl_right(reverse_power(psi, 1.5, T), 0.5, psi, T, t, grid)
        assert got == pytest.approx(expected, rel=1e-4)

    def test_singular_guard(self, psi1):
        grid = QuadGrid.uniform_in_psi(psi1, 64)
        with pytest.raises(SingularityError):
            rl_right(Path.constant(1.0), 0.5, psi1, 1.0, 1.0, grid)

    def test_profile_marks_guarded_nodes(self, psi1):
        grid = QuadGrid.uniform_in_psi(psi1, 64)
        ts, values = rl_right_profile(Path.constant(1.0), 0.5, psi1, grid, end=0.5)
        assert ts[-1] == 0.5
        assert np.isnan(values[-1])
        assert np.all(np.isfinite(values[:-1]))

    def test_order_must_be_in_unit_interval(self, psi1):
        grid = QuadGrid.uniform_in_psi(psi1, 64)
        with pytest.raises(DomainError):
            rl_right(Path.constant(1.0), 1.5, psi1, 1.0, 0.5, grid)


class TestIdentities:
    @pytest.mark.parametrize("alpha", [0.3, 0.7])
    def test_composition(self, psi, alpha):
        grid = QuadGrid.uniform_in_psi(psi, 1024)
        x = power(psi, 2.0) + Path.constant(1.0)
        assert composition_residual_left(x, alpha, psi, grid, workers=1) <= 1e-3

    @pytest.mark.parametrize("alpha", [0.3, 0.7])
    def test_integration_by_parts(self, psi, alpha):
        grid = QuadGrid.uniform_in_psi(psi, 1024)
        x = power(psi, 1.0) + Path.constant(1.0)
        y = power(psi, 2.0)
        assert integration_by_parts_residual(x, y, alpha, psi, grid, workers=1) <= 1e-3

    @pytest.mark.parametrize("operator", [
        lambda x, psi, grid: frac_integral_left(x, 0.4, psi, 0.7, grid),
        lambda x, psi, grid: frac_integral_right(x, 0.4, psi, 0.3, grid),
        lambda x, psi, grid: caputo_left(x, 0.6, psi, 0.7, grid),
        lambda x, psi, grid: caputo_right(x, 0.6, psi, 0.3, grid),
        lambda x, psi, grid: rl_right(x, 0.6, psi, 0.9, 0.3, grid),
    ], ids=["integral-left", "integral-right", "caputo-left", "caputo-right", "rl-right"])
    def test_linearity(self, psi, operator):
        grid = QuadGrid.uniform_in_psi(psi, 256)
        x1 = power(psi, 2.0)
        x2 = power(psi, 1.0) + Path.constant(1.0)
        combined = 1.5 * x1 - 0.7 * x2
        expected = 1.5 * operator(x1, psi, grid) - 0.7 * operator(x2, psi, grid)
        assert operator(combined, psi, grid) == pytest.approx(expected, abs=1e-10)

    def test_kernel_substitution(self, psi2):
        # sqrt(t + 1) operators equal the plain ones applied to x(psi^-1(u)) at u = psi(t)
        plain = make_psi1(a=float(psi2(psi2.a)), b=float(psi2(psi2.b)))
        x = Path(x=lambda t: np.sin(np.asarray(t, dtype=float)),
                 dx_psi=lambda t: np.cos(np.asarray(t, dtype=float)) / psi2.derivative(t))
        x_u = Path(x=lambda u: np.sin(np.asarray(u, dtype=float) ** 2 - 1.0),
                   dx_psi=lambda u: 2.0 * np.asarray(u, dtype=float)
                   * np.cos(np.asarray(u, dtype=float) ** 2 - 1.0))
        grid = QuadGrid.uniform_in_psi(psi2, 1024)
        grid_u = QuadGrid.uniform_in_psi(plain, 1024)
        t = 0.8
        u = float(psi2(t))
        assert caputo_left(x, 0.5, psi2, t, grid) == pytest.approx(
            caputo_left(x_u, 0.5, plain, u, grid_u), rel=1e-6)
        assert frac_integral_left(x, 0.5, psi2, t, grid) == pytest.approx(
            frac_integral_left(x_u, 0.5, plain, u, grid_u), rel=1e-6)

    def test_translation_invariance(self, psi2):
        grid = QuadGrid.uniform_in_psi(psi2, 512)
        shifted = psi2.shifted(3.0)
        shifted_grid = QuadGrid.uniform_in_psi(shifted, 512)
        a = caputo_left(power(psi2, 2.0), 0.5, psi2, 0.9, grid)
        b = caputo_left(power(shifted, 2.0), 0.5, shifted, 0.9, shifted_grid)
        assert a == pytest.approx(b, rel=1e-10)

    def test_threaded_profile_is_identical(self, psi2):
        grid = QuadGrid.uniform_in_psi(psi2, 512)
        x = power(psi2, 2.5)
        _, serial = caputo_left_profile(x, 0.5, psi2, grid, workers=1)
        _, threaded = caputo_left_profile(x, 0.5, psi2, grid, workers=4)
        assert np.array_equal(serial, threaded)

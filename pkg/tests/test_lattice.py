import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peakball.lattice import (
    L_prime_series, L_prime_tail_bound, L_prime_truncated, L_prime_value, L_series, L_tail_bound,
    L_truncated, L_value, SeriesTolerance, constant_A1, constant_A2, constant_a1, constant_a2,
    newton_sigma, solve_reduced_system, solve_sigma_star, truncation_terms,
)

A1_EXACT = 3 ** 1.5 * math.pi ** 2 / 24
A2_EXACT = math.sqrt(3) * math.pi
A12_EXACT = 3 * math.sqrt(3) * math.pi ** 2 / 64


def mp_L(sigma):
    """L(sigma) at 30 digits: mpmath nsum with its own tail extrapolation."""
    with mpmath.workdps(30):
        s = mpmath.mpf(sigma)
        term = lambda j: 2 * (1 / (j * mpmath.pi) - 1 / mpmath.sqrt((j * mpmath.pi) ** 2 + s * s))
        return float(-1 / s + mpmath.nsum(term, [1, mpmath.inf]))


def mp_Lp(sigma):
    with mpmath.workdps(30):
        s = mpmath.mpf(sigma)
        term = lambda j: 2 * s / (s * s + (j * mpmath.pi) ** 2) ** 1.5
        return float(1 / (s * s) + mpmath.nsum(term, [1, mpmath.inf]))


def mp_radial(f):
    with mpmath.workdps(30):
        return float(mpmath.quad(f, [0, 1, mpmath.inf]))


class TestConstants:
    def test_A1_closed_form(self):
        assert constant_A1() == pytest.approx(A1_EXACT, rel=1e-10)

    def test_A2_closed_form(self):
        assert constant_A2() == pytest.approx(A2_EXACT, rel=1e-10)

    def test_a1_a2_closed_form(self):
        assert constant_a1() == pytest.approx(A12_EXACT, rel=1e-10)
        assert constant_a2() == pytest.approx(A12_EXACT, rel=1e-10)

    def test_a2_against_mpmath(self):
        # independent high-precision radial integral of Phi^4 |grad Phi|^2
        f = lambda r: r ** 2 * 3 / (1 + r * r) ** 2 * 3 ** 0.5 * r * r / (1 + r * r) ** 3
        assert constant_a2() == pytest.approx(4 * math.pi / 3 * mp_radial(f), rel=1e-12)


class TestSeries:
    @pytest.mark.parametrize("sigma", [0.3, 1.0, 3.5, 10.0])
    def test_L_matches_mpmath(self, sigma):
        v = L_series(sigma)
        assert abs(v.value - mp_L(sigma)) <= max(v.error_bound, 0) + 5e-15 * max(1, abs(v.value))

    @pytest.mark.parametrize("sigma", [0.3, 1.0, 3.5, 10.0])
    def test_L_prime_matches_mpmath(self, sigma):
        v = L_prime_series(sigma)
        assert v.value == pytest.approx(mp_Lp(sigma), rel=1e-13, abs=1e-14)

    @pytest.mark.parametrize("sigma", [0.5, 2.0, 5.0])
    def test_tail_bound_holds_for_plain_truncation(self, sigma):
        exact = mp_L(sigma)
        for J in (5, 50, 500):
            err = exact - L_truncated(sigma, J)
            assert 0 <= err <= L_tail_bound(sigma, J)
            errp = mp_Lp(sigma) - L_prime_truncated(sigma, J)
            assert 0 <= errp <= L_prime_tail_bound(sigma, J)

    def test_truncation_terms_meets_tolerance(self):
        tol = SeriesTolerance(abs_tol=1e-6)
        J = truncation_terms(2.0, tol)
        assert L_tail_bound(2.0, J) <= 1e-6
        assert abs(L_truncated(2.0, J) - mp_L(2.0)) <= 1e-6

    def test_budget_exceeded_raises(self):
        with pytest.raises(ValueError):
            truncation_terms(2.0, SeriesTolerance(abs_tol=1e-16, max_terms=100))

    @pytest.mark.parametrize("bad", [0.0, -1.0, math.inf, math.nan])
    def test_invalid_sigma(self, bad):
        with pytest.raises(ValueError):
            L_value(bad)

    def test_L_prime_is_derivative(self):
        s, h = 2.7, 1e-5
        fd = (L_value(s + h) - L_value(s - h)) / (2 * h)
        assert fd == pytest.approx(L_prime_value(s), rel=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.05, 30.0))
    def test_L_prime_positive(self, sigma):
        assert L_prime_value(sigma) > 0

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.05, 30.0), st.floats(0.01, 2.0))
    def test_L_increasing(self, sigma, dt):
        assert L_value(sigma + dt) > L_value(sigma)


class TestReducedSystem:
    def test_sigma_star_root(self):
        s = solve_sigma_star()
        assert abs(L_value(s)) <= 1e-10
        assert 3.3 <= s <= 3.7

    def test_two_newton_starts_agree(self):
        assert abs(newton_sigma(2.0) - newton_sigma(5.0)) <= 1e-10

    def test_root_agrees_with_mpmath(self):
        with mpmath.workdps(25):
            root = mpmath.findroot(lambda s: mp_L(float(s)), 3.5)
        assert solve_sigma_star() == pytest.approx(float(root), abs=1e-10)

    def test_lambda_star_and_residuals(self):
        c = solve_reduced_system(1.0)
        r1, r2 = c.residuals()
        assert abs(r1) <= 1e-10 and abs(r2) <= 1e-10
        assert c.lambda_star == pytest.approx(c.A2 * L_prime_value(c.sigma_star) / c.A1, rel=1e-14)

    def test_lambda_star_inverse_in_kprime(self):
        assert solve_reduced_system(2.0).lambda_star == pytest.approx(solve_reduced_system(1.0).lambda_star / 2)

    def test_nonpositive_kprime_rejected(self):
        with pytest.raises(ValueError):
            solve_reduced_system(0.0)

    def test_no_sign_change_raises(self):
        with pytest.raises(ArithmeticError):
            solve_sigma_star(bracket=(5.0, 20.0))

"""Lattice sums L, L' and the scalar constants of the reduced two-parameter system.

The ring of k peaks at distance sigma*sqrt(mu) from the sphere interacts, in
the limit k -> infinity, through the one-dimensional sums::

    L(sigma)  = -1/sigma + sum_{j != 0} (1/|j pi| - 1/sqrt((j pi)^2 + sigma^2))
    L'(sigma) =  sum_{j in Z} sigma / (sigma^2 + (j pi)^2)^(3/2)

The -1/sigma term is the self-image (j = 0) interaction; its derivative is the
j = 0 term of L'.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, special

PI = math.pi


@dataclass(frozen=True)
class SeriesTolerance:
    """Absolute error target and term budget for the truncated series."""

    abs_tol: float = 1e-14
    max_terms: int = 10_000_000

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise ValueError(f"abs_tol must be positive, got {self.abs_tol}")
        if self.max_terms < 10:
            raise ValueError(f"max_terms must be >= 10, got {self.max_terms}")


DEFAULT_TOL = SeriesTolerance()


@dataclass(frozen=True)
class SeriesValue:
    value: float
    error_bound: float
    terms: int


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ValueError(f"sigma must be positive and finite, got {sigma}")
    return sigma


def L_tail_bound(sigma: float, J: int) -> float:
    """Bound on the part of L dropped when both sides are truncated at |j| <= J.

    Each pair (j, -j) contributes at most sigma^2/(pi^3 j^3), and
    sum_{j>J} j^-3 <= 1/(2 J^2).
    """
    return sigma * sigma / (2.0 * PI ** 3 * J * J)


def L_prime_tail_bound(sigma: float, J: int) -> float:
    """Same for L'; pair terms are at most 2 sigma/(pi^3 j^3)."""
    return sigma / (PI ** 3 * J * J)


def _terms_needed(bound_at_one: float, tol: SeriesTolerance) -> int:
    J = max(10, math.ceil(math.sqrt(bound_at_one / tol.abs_tol)))
    if J > tol.max_terms:
        raise ValueError(f"need {J} terms for abs_tol={tol.abs_tol:g}, max_terms={tol.max_terms}")
    return J


def _terms_needed6(bound_at_one: float, tol: SeriesTolerance) -> int:
    J = max(10, math.ceil((bound_at_one / tol.abs_tol) ** (1.0 / 6.0)))
    if J > tol.max_terms:
        raise ValueError(f"need {J} terms for abs_tol={tol.abs_tol:g}, max_terms={tol.max_terms}")
    return J


def truncation_terms(sigma: float, tol: SeriesTolerance = DEFAULT_TOL) -> int:
    """Terms needed by plain truncation of L to meet tol (no tail correction)."""
    return _terms_needed(L_tail_bound(_check_sigma(sigma), 1), tol)


def L_truncated(sigma: float, J: int) -> float:
    """-1/sigma + 2 sum_{j=1}^{J} (1/(j pi) - 1/sqrt((j pi)^2 + sigma^2)).

    Each summand is rewritten as sigma^2 / (a q (a + q)) with a = j pi and
    q = sqrt(a^2 + sigma^2) to avoid cancellation.
    """
    a = PI * np.arange(1, J + 1, dtype=float)
    s2 = sigma * sigma
    q = np.sqrt(a * a + s2)
    return -1.0 / sigma + 2.0 * float(np.sum(s2 / (a * q * (a + q))))


def L_prime_truncated(sigma: float, J: int) -> float:
    a = PI * np.arange(1, J + 1, dtype=float)
    s2 = sigma * sigma
    return 1.0 / s2 + 2.0 * float(np.sum(sigma / (s2 + a * a) ** 1.5))


def L_series(sigma: float, tol: SeriesTolerance = DEFAULT_TOL) -> SeriesValue:
    """L with the first two terms of the tail expansion added back.

    For j > J the pair (j, -j) equals sigma^2/a^3 - (3/4) sigma^4/a^5 + rest,
    a = j pi, with 0 <= rest <= (5/8) sigma^6/a^7 (the pair is a completely
    monotone function of sigma^2/a^2, so Taylor remainders alternate).  Summed
    with Hurwitz zeta values, the error is at most 5 sigma^6/(48 pi^7 J^6).
    """
    sigma = _check_sigma(sigma)
    J = _terms_needed6(5 * sigma ** 6 / (48 * PI ** 7), tol)
    s2 = sigma * sigma
    tail = (s2 / PI ** 3 * float(special.zeta(3.0, J + 1))
            - 0.75 * s2 * s2 / PI ** 5 * float(special.zeta(5.0, J + 1)))
    return SeriesValue(L_truncated(sigma, J) + tail, 5 * sigma ** 6 / (48 * PI ** 7 * J ** 6), J)


def L_prime_series(sigma: float, tol: SeriesTolerance = DEFAULT_TOL) -> SeriesValue:
    """L' with its tail expansion 2 sigma/a^3 - 3 sigma^3/a^5 added back.

    Remaining error at most 5 sigma^5/(8 pi^7 J^6).
    """
    sigma = _check_sigma(sigma)
    J = _terms_needed6(5 * sigma ** 5 / (8 * PI ** 7), tol)
    tail = (2 * sigma / PI ** 3 * float(special.zeta(3.0, J + 1))
            - 3 * sigma ** 3 / PI ** 5 * float(special.zeta(5.0, J + 1)))
    return SeriesValue(L_prime_truncated(sigma, J) + tail, 5 * sigma ** 5 / (8 * PI ** 7 * J ** 6), J)


def L_value(sigma: float, tol: SeriesTolerance = DEFAULT_TOL) -> float:
    return L_series(sigma, tol).value


def L_prime_value(sigma: float, tol: SeriesTolerance = DEFAULT_TOL) -> float:
    return L_prime_series(sigma, tol).value


# ---------------------------------------------------------------------------
# radial constants
# ---------------------------------------------------------------------------


def _radial_integral(g, abs_tol: float = 1e-12) -> float:
    """int_0^inf g(r) dr as [0, 1] plus the tail mapped by r = 1/s onto (0, 1]."""
    head, e1 = integrate.quad(g, 0.0, 1.0, epsabs=abs_tol / 4, epsrel=1e-13, limit=200)

    def tail_integrand(s):
        if s == 0.0:
            return 0.0
        return g(1.0 / s) / (s * s)

    tail, e2 = integrate.quad(tail_integrand, 0.0, 1.0, epsabs=abs_tol / 4, epsrel=1e-13, limit=200)
    if e1 + e2 > abs_tol:
        raise ArithmeticError(f"radial quadrature did not converge (error estimate {e1 + e2:.2e})")
    return head + tail


_S3 = 3.0 ** 0.5


def constant_A1() -> float:
    """(1/6) int Phi^6 over R^3."""
    # Phi^6 = 3^(3/2) (1+r^2)^-3
    return 4 * PI / 6 * _radial_integral(lambda r: r * r * 3 * _S3 / (1 + r * r) ** 3)


def constant_A2() -> float:
    """(1/4) Phi(0) int Phi^5 over R^3."""
    # Phi(0) Phi^5 = 3^(3/2) (1+r^2)^-5/2
    return PI * _radial_integral(lambda r: r * r * 3 * _S3 / (1 + r * r) ** 2.5)


def constant_a1() -> float:
    """int Phi^4 (Phi/2 + x . grad Phi)^2 over R^3."""
    def g(r):
        p = 3 ** 0.25 / math.sqrt(1 + r * r)
        dp = -3 ** 0.25 * r / (1 + r * r) ** 1.5
        return r * r * p ** 4 * (0.5 * p + r * dp) ** 2
    return 4 * PI * _radial_integral(g)


def constant_a2() -> float:
    """(1/3) int Phi^4 |grad Phi|^2 over R^3."""
    def g(r):
        p = 3 ** 0.25 / math.sqrt(1 + r * r)
        dp = -3 ** 0.25 * r / (1 + r * r) ** 1.5
        return r * r * p ** 4 * dp * dp
    return 4 * PI / 3 * _radial_integral(g)


# ---------------------------------------------------------------------------
# reduced system
# ---------------------------------------------------------------------------


def newton_sigma(sigma0: float, tol: SeriesTolerance = DEFAULT_TOL, max_iter: int = 60) -> float:
    """Damped Newton on L(sigma) = 0 from sigma0; steps keep sigma positive."""
    s = _check_sigma(sigma0)
    for _ in range(max_iter):
        f = L_value(s, tol)
        step = f / L_prime_value(s, tol)
        while s - step <= 0:
            step *= 0.5
        s -= step
        if abs(step) <= 1e-15 * max(1.0, s):
            break
    else:
        raise ArithmeticError("Newton iteration for sigma* did not converge")
    return s


def solve_sigma_star(tol: SeriesTolerance = DEFAULT_TOL, bracket=(0.5, 20.0)) -> float:
    """Unique positive root of L: sign-change scan, Brent bisection, Newton polish."""
    return _solve_sigma_star_cached(tol, tuple(bracket))


@lru_cache(maxsize=8)
def _solve_sigma_star_cached(tol: SeriesTolerance, bracket) -> float:
    grid = np.linspace(bracket[0], bracket[1], 40)
    vals = [L_value(s, tol) for s in grid]
    idx = [i for i in range(len(grid) - 1) if vals[i] <= 0 < vals[i + 1]]
    if not idx:
        raise ArithmeticError(f"L has no sign change on {bracket}")
    i = idx[0]
    s = optimize.brentq(lambda t: L_value(t, tol), grid[i], grid[i + 1], xtol=1e-14, rtol=1e-15)
    s = newton_sigma(s, tol, max_iter=5)
    if abs(L_value(s, tol)) > 1e-10:
        raise ArithmeticError(f"|L(sigma*)| = {abs(L_value(s, tol)):.3e} exceeds 1e-10")
    return s


@dataclass(frozen=True)
class ReducedConstants:
    A1: float
    A2: float
    a1: float
    a2: float
    sigma_star: float
    lambda_star: float
    kprime1: float
    L_prime_star: float

    def residuals(self, tol: SeriesTolerance = DEFAULT_TOL) -> tuple[float, float]:
        """(L(sigma*), K'(1) A1 lambda* - A2 L'(sigma*))."""
        return (L_value(self.sigma_star, tol),
                self.kprime1 * self.A1 * self.lambda_star - self.A2 * L_prime_value(self.sigma_star, tol))


@lru_cache(maxsize=1)
def _bubble_constants() -> tuple[float, float, float, float]:
    return constant_A1(), constant_A2(), constant_a1(), constant_a2()


def solve_reduced_system(kprime1: float = 1.0, tol: SeriesTolerance = DEFAULT_TOL) -> ReducedConstants:
    """Root (lambda*, sigma*) of L(sigma) = 0, K'(1) A1 lambda = A2 L'(sigma)."""
    if not kprime1 > 0:
        raise ValueError(f"K'(1) must be positive, got {kprime1}")
    A1, A2, a1, a2 = _bubble_constants()
    s = solve_sigma_star(tol)
    lp = L_prime_value(s, tol)
    return ReducedConstants(A1, A2, a1, a2, s, A2 * lp / (kprime1 * A1), float(kprime1), lp)

"""Closed-form evaluation of the k-peak ansatz on the unit ball of R^3.

Every function here is vectorised over points: ``x`` is any array whose last
axis has length 3, and the result has the leading shape of ``x``.  The peak
sums are evaluated in chunks so that ``npoints * k`` stays bounded.

Notation used throughout the module::

    Phi(y)   = 3**0.25 / sqrt(1 + |y|^2)
    m_i      = (cos 2 pi i/k, sin 2 pi i/k, 0)
    eps      = mu / lam,     r = 1 - sigma * sqrt(mu)
    d_i      = sqrt(1 + |x - r m_i|^2 / eps^2)
    d_i*     = sqrt(1 + |r x - m_i|^2 / eps^2)
    U_i      = P / d_i,  U_i* = P / d_i*,  P = Phi(0) K(r)^(-1/4) eps^(-1/2)
    W        = sum_i (U_i - U_i*)
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

PHI0 = 3.0 ** 0.25

_CHUNK = 400_000  # max number of (point, peak) pairs held at once


class OverlappingPeaksWarning(UserWarning):
    """Raised (as a warning) when k * eps >= 1 and neighbouring peaks overlap."""


# ---------------------------------------------------------------------------
# coefficient K
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialCoefficient:
    """Radial coefficient K(|x|) normalised so that K(1) = 1.

    Use the constructors :meth:`henon`, :meth:`constant` and :meth:`table`.
    """

    kind: str
    alpha: float | None = None
    _value: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False, default=None)
    _deriv: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False, default=None)

    @classmethod
    def henon(cls, alpha: float) -> "RadialCoefficient":
        if not alpha > 0:
            raise ValueError(f"Henon exponent must be positive, got {alpha}")
        a = float(alpha)
        return cls("henon", a, lambda t: np.power(t, a), lambda t: a * np.power(t, a - 1.0))

    @classmethod
    def constant(cls) -> "RadialCoefficient":
        return cls("constant", None, lambda t: np.ones_like(t), lambda t: np.zeros_like(t))

    @classmethod
    def table(cls, t, values) -> "RadialCoefficient":
        """Cubic-spline interpolant of tabulated values, rescaled to K(1) = 1."""
        from scipy.interpolate import CubicSpline

        t = np.asarray(t, dtype=float)
        values = np.asarray(values, dtype=float)
        if t.ndim != 1 or t.shape != values.shape or t.size < 4:
            raise ValueError("table needs matching 1-D arrays with at least 4 entries")
        if t[0] > 0 or t[-1] < 1 or np.any(np.diff(t) <= 0):
            raise ValueError("table abscissae must increase and cover [0, 1]")
        if np.any(values < 0):
            raise ValueError("K must be nonnegative")
        spline = CubicSpline(t, values)
        k1 = float(spline(1.0))
        if k1 <= 0:
            raise ValueError("K(1) must be positive")
        dspline = spline.derivative()
        return cls("table", None, lambda s: spline(s) / k1, lambda s: dspline(s) / k1)

    def value(self, t):
        return self._value(np.asarray(t, dtype=float))

    def derivative(self, t):
        return self._deriv(np.asarray(t, dtype=float))

    @property
    def kprime1(self) -> float:
        return float(self.derivative(1.0))

    def check_hypothesis(self) -> None:
        """Raise ``ValueError`` unless K(1) = 1 and K'(1) > 0."""
        if not math.isclose(float(self.value(1.0)), 1.0, rel_tol=1e-12):
            raise ValueError("K is not normalised to K(1) = 1")
        if not self.kprime1 > 0:
            raise ValueError(f"theorem mode needs K'(1) > 0, got {self.kprime1}")


# ---------------------------------------------------------------------------
# parameters and peak frame
# ---------------------------------------------------------------------------


def theorem_k(mu: float) -> int:
    """Number of peaks floor(mu^(-1/2)), robust to rounding of decimal mu."""
    k = int(math.floor(1.0 / math.sqrt(mu) + 1e-9))
    return k


@dataclass(frozen=True)
class PeakConfig:
    """Parameter bundle (k, mu, lam, sigma) of one ansatz instance.

    ``star`` optionally carries (lambda*, sigma*) for the theorem-mode window
    check; :meth:`theorem` fills it in.
    """

    mu: float
    lam: float
    sigma: float
    k: int
    theorem_mode: bool = False
    star: tuple[float, float] | None = None

    def __post_init__(self):
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if int(self.k) != self.k or self.k < 2:
            raise ValueError(f"k must be an integer >= 2, got {self.k}")
        if not self.r > 0:
            raise ValueError(f"r = 1 - sigma*sqrt(mu) = {self.r} must be positive")
        if self.theorem_mode:
            if self.k != theorem_k(self.mu):
                raise ValueError(f"theorem mode requires k = floor(mu^-1/2) = {theorem_k(self.mu)}")
            if self.star is not None:
                ls, ss = self.star
                if not (0.5 * ls <= self.lam <= 2 * ls and 0.5 * ss <= self.sigma <= 2 * ss):
                    raise ValueError("theorem mode requires lam in [lam*/2, 2 lam*] and sigma in [sigma*/2, 2 sigma*]")

    @classmethod
    def theorem(cls, mu: float, K: RadialCoefficient, lam: float | None = None,
                sigma: float | None = None) -> "PeakConfig":
        """Theorem-mode configuration; lam and sigma default to the reduced root."""
        from .lattice import solve_reduced_system

        K.check_hypothesis()
        consts = solve_reduced_system(K.kprime1)
        star = (consts.lambda_star, consts.sigma_star)
        return cls(mu, consts.lambda_star if lam is None else lam,
                   consts.sigma_star if sigma is None else sigma,
                   theorem_k(mu), True, star)

    @property
    def epsilon(self) -> float:
        return self.mu / self.lam

    @property
    def r(self) -> float:
        return 1.0 - self.sigma * math.sqrt(self.mu)

    @property
    def overlapping(self) -> bool:
        return self.k * self.epsilon >= 1.0

    def with_params(self, lam: float | None = None, sigma: float | None = None) -> "PeakConfig":
        """Copy with new (lam, sigma); theorem-mode window checks are kept."""
        return replace(self, lam=self.lam if lam is None else lam,
                       sigma=self.sigma if sigma is None else sigma)

    def peak_height(self, K: RadialCoefficient) -> float:
        return PHI0 * float(K.value(self.r)) ** -0.25 * self.epsilon ** -0.5

    def warn_if_overlapping(self) -> None:
        if self.overlapping:
            warnings.warn(f"k*eps = {self.k * self.epsilon:.3g} >= 1: peaks overlap",
                          OverlappingPeaksWarning, stacklevel=2)


@dataclass(frozen=True)
class PeakFrame:
    peaks: np.ndarray

    @property
    def k(self) -> int:
        return len(self.peaks)

    def sector_of(self, x) -> np.ndarray:
        """Index i maximising x . m_i; ties go to the smallest index."""
        x = np.asarray(x, dtype=float)
        proj = x @ self.peaks.T
        top = proj.max(axis=-1, keepdims=True)
        tol = 1e-12 * np.maximum(1.0, np.linalg.norm(x, axis=-1, keepdims=True))
        return np.argmax(proj >= top - tol, axis=-1)


def peak_locations(k: int) -> PeakFrame:
    if int(k) != k or k < 2:
        raise ValueError(f"need k >= 2, got {k}")
    th = 2.0 * np.pi * np.arange(k) / k
    m = np.stack([np.cos(th), np.sin(th), np.zeros(k)], axis=1)
    return PeakFrame(m)


def standard_bubble(x):
    x = np.asarray(x, dtype=float)
    return PHI0 / np.sqrt(1.0 + np.sum(x * x, axis=-1))


# ---------------------------------------------------------------------------
# symmetry group helpers
# ---------------------------------------------------------------------------


def rotate(x, k: int, times: int = 1):
    """Rotate points by times * 2 pi / k about the x3-axis."""
    x = np.asarray(x, dtype=float)
    a = 2.0 * np.pi * times / k
    c, s = math.cos(a), math.sin(a)
    out = x.copy()
    out[..., 0] = c * x[..., 0] - s * x[..., 1]
    out[..., 1] = s * x[..., 0] + c * x[..., 1]
    return out


def reflect_x3(x):
    out = np.array(x, dtype=float, copy=True)
    out[..., 2] *= -1
    return out


def conjugate(x):
    """Planar reflection z -> conj(z), i.e. x2 -> -x2."""
    out = np.array(x, dtype=float, copy=True)
    out[..., 1] *= -1
    return out


# ---------------------------------------------------------------------------
# core evaluation
# ---------------------------------------------------------------------------


def signed_power(w, p: float):
    """|w|^(p-1) w, equal to w^p for w > 0."""
    w = np.asarray(w, dtype=float)
    out = np.zeros_like(w)
    pos = w > 0
    neg = w < 0
    out[pos] = np.exp(p * np.log(w[pos]))
    out[neg] = -np.exp(p * np.log(-w[neg]))
    return out


_FIELDS = ("W", "U0", "R", "grad", "lap", "W_lam", "W_sig", "lap_lam", "lap_sig",
           "S", "gradS", "gradR")


def _eval_chunk(cfg: PeakConfig, K: RadialCoefficient, X: np.ndarray, need: set) -> dict:
    k, eps, r, mu = cfg.k, cfg.epsilon, cfg.r, cfg.mu
    m = peak_locations(k).peaks
    Kr = float(K.value(r))
    P = PHI0 * Kr ** -0.25 * eps ** -0.5
    inv_e2 = 1.0 / (eps * eps)

    a = X[:, None, :] - r * m[None, :, :]
    b = r * X[:, None, :] - m[None, :, :]
    d2 = 1.0 + np.einsum("nkj,nkj->nk", a, a) * inv_e2
    ds2 = 1.0 + np.einsum("nkj,nkj->nk", b, b) * inv_e2
    invd = 1.0 / np.sqrt(d2)
    invds = 1.0 / np.sqrt(ds2)
    U = P * invd
    Us = P * invds
    out = {}
    if "W" in need:
        out["W"] = U.sum(axis=1) - Us.sum(axis=1)
    if "U0" in need:
        out["U0"] = U[:, 0]
    if "S" in need or "R" in need:
        S = invd[:, 1:].sum(axis=1) - invds.sum(axis=1)
        out["S"] = S
        out["R"] = P * S
    if "grad" in need or "gradS" in need or "gradR" in need:
        ga = (invd ** 3)[:, :, None] * a * inv_e2
        gb = (invds ** 3)[:, :, None] * b * (r * inv_e2)
        gS = -ga[:, 1:, :].sum(axis=1) + gb.sum(axis=1)
        out["gradS"] = gS
        out["gradR"] = P * gS
        out["grad"] = P * (-ga.sum(axis=1) + gb.sum(axis=1))
    if "lap" in need:
        out["lap"] = -Kr * ((U ** 5).sum(axis=1) - r * r * (Us ** 5).sum(axis=1))
    if need & {"W_lam", "lap_lam"}:
        Ul = U / (2 * cfg.lam) * (2 * invd ** 2 - 1)
        Usl = Us / (2 * cfg.lam) * (2 * invds ** 2 - 1)
        out["W_lam"] = Ul.sum(axis=1) - Usl.sum(axis=1)
        if "lap_lam" in need:
            out["lap_lam"] = -5 * Kr * ((U ** 4 * Ul).sum(axis=1) - r * r * (Us ** 4 * Usl).sum(axis=1))
    if need & {"W_sig", "lap_sig"}:
        sq = math.sqrt(mu)
        dK = float(K.derivative(r))
        kappa = dK / (4 * Kr)
        am = np.einsum("nkj,kj->nk", a, m)
        bx = np.einsum("nkj,nj->nk", b, X)
        Us_ = sq * U * (kappa - am * inv_e2 * invd ** 2)
        Uss = sq * Us * (kappa + bx * inv_e2 * invds ** 2)
        out["W_sig"] = Us_.sum(axis=1) - Uss.sum(axis=1)
        if "lap_sig" in need:
            r_s = -sq
            lap_u = -(dK * r_s * U ** 5 + 5 * Kr * U ** 4 * Us_)
            lap_us = -((dK * r * r + 2 * r * Kr) * r_s * Us ** 5 + 5 * Kr * r * r * Us ** 4 * Uss)
            out["lap_sig"] = lap_u.sum(axis=1) - lap_us.sum(axis=1)
    return out


def evaluate(cfg: PeakConfig, K: RadialCoefficient, x, fields) -> dict:
    """Evaluate several ansatz fields at once.

    ``fields`` is any subset of ``W, U0, R, S, grad, gradS, gradR, lap, W_lam,
    W_sig, lap_lam, lap_sig``.  ``lap*`` entries are analytic Laplacians,
    ``S`` is the unnormalised interaction sum.
    """
    need = set(fields)
    unknown = need - set(_FIELDS)
    if unknown:
        raise ValueError(f"unknown fields {sorted(unknown)}")
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    X = x.reshape(-1, 3)
    n = X.shape[0]
    step = max(1, _CHUNK // cfg.k)
    parts = [_eval_chunk(cfg, K, X[i:i + step], need) for i in range(0, n, step)] or [
        _eval_chunk(cfg, K, X, need)]
    res = {}
    for name in need:
        arr = np.concatenate([p[name] for p in parts], axis=0)
        vec = name in ("grad", "gradS", "gradR")
        res[name] = arr.reshape(lead + ((3,) if vec else ()))
    return res


def bubble_terms(cfg: PeakConfig, K: RadialCoefficient, i: int, x):
    """(U_i(x), U_i*(x))."""
    if not 0 <= i < cfg.k:
        raise IndexError(f"peak index {i} outside [0, {cfg.k})")
    x = np.asarray(x, dtype=float)
    m = peak_locations(cfg.k).peaks[i]
    P = cfg.peak_height(K)
    e2 = cfg.epsilon ** 2
    a = x - cfg.r * m
    b = cfg.r * x - m
    U = P / np.sqrt(1 + np.sum(a * a, axis=-1) / e2)
    Us = P / np.sqrt(1 + np.sum(b * b, axis=-1) / e2)
    return U, Us


def distances(cfg: PeakConfig, x):
    """Arrays (d_i, d_i*) with a trailing peak axis of length k."""
    x = np.asarray(x, dtype=float)
    m = peak_locations(cfg.k).peaks
    e2 = cfg.epsilon ** 2
    a = x[..., None, :] - cfg.r * m
    b = cfg.r * x[..., None, :] - m
    return (np.sqrt(1 + np.sum(a * a, axis=-1) / e2),
            np.sqrt(1 + np.sum(b * b, axis=-1) / e2))


def ansatz(cfg: PeakConfig, K: RadialCoefficient, x):
    return evaluate(cfg, K, x, ["W"])["W"]


def ansatz_gradient(cfg: PeakConfig, K: RadialCoefficient, x):
    return evaluate(cfg, K, x, ["grad"])["grad"]


def ansatz_laplacian(cfg: PeakConfig, K: RadialCoefficient, x):
    """Analytic Laplacian -K(r) sum(U_i^5 - r^2 U_i*^5)."""
    return evaluate(cfg, K, x, ["lap"])["lap"]


def _check_which(which: str) -> str:
    aliases = {"lambda": "lam", "lam": "lam", "sigma": "sig", "sig": "sig"}
    if which not in aliases:
        raise ValueError(f"which must be 'lambda' or 'sigma', got {which!r}")
    return aliases[which]


def ansatz_param_deriv(cfg: PeakConfig, K: RadialCoefficient, which: str, x):
    """dW/dlambda or dW/dsigma at fixed mu and x."""
    key = "W_" + _check_which(which)
    return evaluate(cfg, K, x, [key])[key]


def param_deriv_laplacian(cfg: PeakConfig, K: RadialCoefficient, which: str, x):
    """Analytic Laplacian of dW/dlambda or dW/dsigma."""
    key = "lap_" + _check_which(which)
    return evaluate(cfg, K, x, [key])[key]


def _e_prefactor(cfg: PeakConfig, normalization: str) -> float:
    if normalization == "bubble":
        return cfg.epsilon ** -0.5
    if normalization == "lattice":
        return cfg.lam / math.sqrt(cfg.mu)
    raise ValueError(f"normalization must be 'bubble' or 'lattice', got {normalization!r}")


def interaction_E(cfg: PeakConfig, x, normalization: str = "bubble"):
    """Interaction function pre * (sum_{i>=1} 1/d_i - sum_i 1/d_i*).

    ``normalization="bubble"`` uses pre = eps^(-1/2), for which
    R = Phi(0) K(r)^(-1/4) E holds exactly.  ``"lattice"`` uses
    pre = lam / sqrt(mu); this version has the lam-independent limits
    E(r m_0) -> L(sigma)/2 and sqrt(mu) m_0 . grad E(r m_0) -> -L'(sigma)/4.
    The two differ by the factor sqrt(lam).
    """
    S = evaluate(cfg, RadialCoefficient.constant(), x, ["S"])["S"]
    return _e_prefactor(cfg, normalization) * S


def interaction_E_gradient(cfg: PeakConfig, x, normalization: str = "bubble"):
    gS = evaluate(cfg, RadialCoefficient.constant(), x, ["gradS"])["gradS"]
    return _e_prefactor(cfg, normalization) * gS


def remainder_R(cfg: PeakConfig, K: RadialCoefficient, x):
    """R = W - U_0, summed directly to avoid cancellation near the peak."""
    return evaluate(cfg, K, x, ["R"])["R"]


def remainder_R_gradient(cfg: PeakConfig, K: RadialCoefficient, x):
    return evaluate(cfg, K, x, ["gradR"])["gradR"]


def weight(cfg: PeakConfig, rho: float, x, starred: bool = False):
    """omega_rho(x) = sum_i d_i^-rho (or the d_i* analogue)."""
    if not (rho >= 0 and math.isfinite(rho)):
        raise ValueError(f"weight exponent must be finite and >= 0, got {rho}")
    d, ds = distances(cfg, x)
    return np.sum((ds if starred else d) ** -rho, axis=-1)


def weighted_sup_norm(points, values, cfg: PeakConfig, rho: float) -> float:
    """max |f(x)| / omega_rho(x) over the sampled points."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("weighted_sup_norm needs at least one sample")
    if values.size != points.shape[0]:
        raise ValueError("points and values differ in length")
    return float(np.max(np.abs(values) / weight(cfg, rho, points)))


def residual_F(cfg: PeakConfig, K: RadialCoefficient, x):
    """F = Delta W + K(|x|) W^(5+mu) with the analytic Laplacian."""
    x = np.asarray(x, dtype=float)
    f = evaluate(cfg, K, x, ["W", "lap"])
    Kx = K.value(np.linalg.norm(x, axis=-1))
    return f["lap"] + Kx * signed_power(f["W"], 5 + cfg.mu)


def residual_F_param_deriv(cfg: PeakConfig, K: RadialCoefficient, which: str, x):
    """dF/dt = Delta W_t + (5+mu) K |W|^(4+mu) W_t; note L W_t = -dF/dt."""
    t = _check_which(which)
    x = np.asarray(x, dtype=float)
    f = evaluate(cfg, K, x, ["W", "W_" + t, "lap_" + t])
    Kx = K.value(np.linalg.norm(x, axis=-1))
    p = 5 + cfg.mu
    return f["lap_" + t] + p * Kx * np.abs(f["W"]) ** (p - 1) * f["W_" + t]


def _binomial_remainder(s, p: float):
    """(1+s)^p - 1 - p s without cancellation, for s > -1."""
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    small = np.abs(s) < 1e-2
    ss = s[small]
    coef = p * (p - 1) / 2.0
    acc = np.zeros_like(ss)
    powr = ss * ss
    for n in range(2, 12):
        acc += coef * powr
        coef *= (p - n) / (n + 1)
        powr = powr * ss
    out[small] = acc
    sb = s[~small]
    out[~small] = np.expm1(p * np.log1p(sb)) - p * sb
    return out


def nonlinear_N(cfg: PeakConfig, K: RadialCoefficient, x, phi_val, W=None):
    """K [g(W+phi) - g(W) - g'(W) phi] with g(u) = |u|^(4+mu) u.

    Pass ``W`` to reuse precomputed ansatz values.
    """
    x = np.asarray(x, dtype=float)
    p = 5 + cfg.mu
    if W is None:
        W = ansatz(cfg, K, x)
    W, phi = np.broadcast_arrays(np.asarray(W, dtype=float), np.asarray(phi_val, dtype=float))
    Kx = K.value(np.linalg.norm(x, axis=-1))
    out = np.empty(W.shape)
    pos = W > 0
    s = np.zeros(W.shape)
    s[pos] = phi[pos] / W[pos]
    stable = pos & (s > -0.5)
    out[stable] = W[stable] ** p * _binomial_remainder(s[stable], p)
    rest = ~stable
    Wr, pr = W[rest], phi[rest]
    out[rest] = (signed_power(Wr + pr, p) - signed_power(Wr, p)
                 - p * np.abs(Wr) ** (p - 1) * pr)
    return Kx * out

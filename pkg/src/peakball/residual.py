"""Integrated and sup-norm diagnostics of the ansatz, and mu-sweep scaling studies.

All integrals go through :func:`peakball.quadrature.integrate_ball` with the
symmetric (one piece, quarter azimuth) rule, since every integrand here is
invariant under the symmetry group of the peak ring.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import qmc

from . import bubble as bc
from .bubble import PeakConfig, RadialCoefficient, evaluate, signed_power, theorem_k
from .lattice import L_prime_value, L_value, solve_reduced_system
from .quadrature import QuadratureSpec, integrate_ball, piece_nodes

ANALYSIS_SPEC = QuadratureSpec(n_radial=12, n_panels=8, n_angular=48, refinement_levels=0)
DEFAULT_MU_SWEEP = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4)


def _radial_K(K: RadialCoefficient, X):
    return K.value(np.linalg.norm(X, axis=-1))


# ---------------------------------------------------------------------------
# Gram matrix and energy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GramMatrix:
    """Scaled Dirichlet inner products of W_lambda and W_sigma.

    ``m21`` is the transposed computation <-Delta W_sigma, W_lambda>, kept as
    an integration-by-parts check; the matrix itself uses ``m12``.
    """

    m11: float
    m12: float
    m22: float
    m21: float

    def as_array(self) -> np.ndarray:
        return np.array([[self.m11, self.m12], [self.m12, self.m22]])

    def deviation(self, a1: float, a2: float, scale: float = 1.0) -> float:
        """max-norm distance to scale * diag(a1, a2)."""
        return float(np.max(np.abs(self.as_array() - scale * np.diag([a1, a2]))))


def gram_matrix(cfg: PeakConfig, K: RadialCoefficient, spec: QuadratureSpec = ANALYSIS_SPEC) -> GramMatrix:
    """M = sqrt(mu) [[lam^2 <W_l,W_l>, lam^-1 sqrt(mu) <W_s,W_l>], [., lam^-2 mu <W_s,W_s>]].

    Each Dirichlet product <grad W_l, grad W_t> is evaluated as
    int (-Delta W_l) W_t with the analytic Laplacian, so no gradient enters.
    """
    def g(X):
        e = evaluate(cfg, K, X, ["lap_lam", "lap_sig", "W_lam", "W_sig"])
        return np.stack([-e["lap_lam"] * e["W_lam"], -e["lap_lam"] * e["W_sig"],
                         -e["lap_sig"] * e["W_lam"], -e["lap_sig"] * e["W_sig"]], axis=-1)

    G = integrate_ball(g, cfg, spec, symmetric=True).value
    s, lam = math.sqrt(cfg.mu), cfg.lam
    return GramMatrix(m11=s * lam ** 2 * G[0], m12=s * s * G[1] / lam,
                      m22=s * cfg.mu * G[3] / lam ** 2, m21=s * s * G[2] / lam)


def _energy_density(cfg, K):
    p = 6 + cfg.mu

    def g(X):
        e = evaluate(cfg, K, X, ["W", "grad"])
        return 0.5 * np.sum(e["grad"] ** 2, axis=-1) - _radial_K(K, X) / p * np.abs(e["W"]) ** p
    return g


def energy_J(cfg: PeakConfig, K: RadialCoefficient, spec: QuadratureSpec = ANALYSIS_SPEC) -> float:
    """J = int (|grad W|^2/2 - K W^(6+mu)/(6+mu)) with analytic gradients."""
    return float(integrate_ball(_energy_density(cfg, K), cfg, spec, symmetric=True).value)


def energy_derivatives(cfg: PeakConfig, K: RadialCoefficient,
                       spec: QuadratureSpec = ANALYSIS_SPEC) -> tuple[float, float]:
    """(dJ/dlambda, dJ/dsigma) as -<F, W_t>.

    Since W = 0 on the sphere for every (lambda, sigma), differentiating J and
    integrating by parts gives dJ/dt = -int F W_t exactly.
    """
    p = 5 + cfg.mu

    def g(X):
        e = evaluate(cfg, K, X, ["W", "lap", "W_lam", "W_sig"])
        F = e["lap"] + _radial_K(K, X) * signed_power(e["W"], p)
        return np.stack([F * e["W_lam"], F * e["W_sig"]], axis=-1)

    v = integrate_ball(g, cfg, spec, symmetric=True).value
    return float(-v[0]), float(-v[1])


def energy_fd_derivatives(cfg: PeakConfig, K: RadialCoefficient, spec: QuadratureSpec = ANALYSIS_SPEC,
                          rel_step: float = 1e-4) -> tuple[float, float]:
    """Central differences of energy_J in lambda and sigma."""
    hl, hs = rel_step * cfg.lam, rel_step * cfg.sigma
    dl = (energy_J(cfg.with_params(lam=cfg.lam + hl), K, spec)
          - energy_J(cfg.with_params(lam=cfg.lam - hl), K, spec)) / (2 * hl)
    ds = (energy_J(cfg.with_params(sigma=cfg.sigma + hs), K, spec)
          - energy_J(cfg.with_params(sigma=cfg.sigma - hs), K, spec)) / (2 * hs)
    return dl, ds


@dataclass(frozen=True)
class SecondDerivatives:
    d2J_dlambda2: float
    d2J_dsigmadlambda: float
    d2J_dlambdadsigma: float

    @property
    def mixed_asymmetry(self) -> float:
        a, b = self.d2J_dsigmadlambda, self.d2J_dlambdadsigma
        return abs(a - b) / max(abs(a), abs(b), 1e-300)


def energy_second_derivatives(cfg: PeakConfig, K: RadialCoefficient, spec: QuadratureSpec = ANALYSIS_SPEC,
                              rel_step: float = 1e-4) -> SecondDerivatives:
    """Second derivatives by Richardson-extrapolated central differences of
    :func:`energy_derivatives`.

    ``d2J_dsigmadlambda`` differentiates dJ/dlambda in sigma and
    ``d2J_dlambdadsigma`` differentiates dJ/dsigma in lambda.
    """
    def rich(fun, x0, h):
        d1 = (fun(x0 + h) - fun(x0 - h)) / (2 * h)
        d2 = (fun(x0 + h / 2) - fun(x0 - h / 2)) / h
        return (4 * d2 - d1) / 3

    hl, hs = rel_step * cfg.lam, rel_step * cfg.sigma
    by_lam = lambda lam: np.array(energy_derivatives(cfg.with_params(lam=lam), K, spec))
    by_sig = lambda sig: np.array(energy_derivatives(cfg.with_params(sigma=sig), K, spec))
    dl = rich(by_lam, cfg.lam, hl)
    ds = rich(by_sig, cfg.sigma, hs)
    return SecondDerivatives(float(dl[0]), float(ds[0]), float(dl[1]))


# ---------------------------------------------------------------------------
# sup norms and limits
# ---------------------------------------------------------------------------


def sup_samples(cfg: PeakConfig, n_random: int = 8192, seed: int = 0,
                spec: QuadratureSpec = ANALYSIS_SPEC) -> np.ndarray:
    """Sample points for weighted sup norms.

    The quadrature nodes of the peak-0 piece plus ``n_random`` scrambled
    Sobol points around r m_0 with log-uniform radius between eps/10 and
    sqrt(mu); points outside the ball are dropped.  Symmetric functions attain
    their sup norm over the whole ball on these samples.
    """
    pts, _ = piece_nodes(cfg, spec, symmetric=True)
    if n_random > 0:
        u = qmc.Sobol(3, scramble=True, seed=seed).random(n_random)
        lo, hi = math.log(cfg.epsilon / 10), math.log(math.sqrt(cfg.mu))
        rad = np.exp(lo + (hi - lo) * u[:, 0])
        ct = 2 * u[:, 1] - 1
        st = np.sqrt(1 - ct * ct)
        ph = 2 * np.pi * u[:, 2]
        q = np.array([cfg.r, 0, 0]) + rad[:, None] * np.stack([ct, st * np.cos(ph), st * np.sin(ph)], -1)
        pts = np.concatenate([pts, q[np.linalg.norm(q, axis=1) < 1]])
    return pts


def residual_weighted_norm(cfg: PeakConfig, K: RadialCoefficient, rho: float,
                           points: np.ndarray | None = None) -> float:
    """||F||_rho = sup |F| / omega_rho over the sample points."""
    if points is None:
        points = sup_samples(cfg)
    return bc.weighted_sup_norm(points, bc.residual_F(cfg, K, points), cfg, rho)


def E_limit_deviation(cfg: PeakConfig) -> float:
    """|E(r m_0) - L(sigma)/2| with the lambda-independent normalisation."""
    x = np.array([cfg.r, 0.0, 0.0])
    return abs(float(bc.interaction_E(cfg, x, "lattice")) - 0.5 * L_value(cfg.sigma))


def gradE_limit_deviation(cfg: PeakConfig) -> float:
    """|sqrt(mu) m_0 . grad E(r m_0) + L'(sigma)/4|."""
    x = np.array([cfg.r, 0.0, 0.0])
    g = bc.interaction_E_gradient(cfg, x, "lattice")
    return abs(math.sqrt(cfg.mu) * float(g[0]) + 0.25 * L_prime_value(cfg.sigma))


def LW_lambda_pairing(cfg: PeakConfig, K: RadialCoefficient, spec: QuadratureSpec = ANALYSIS_SPEC) -> float:
    """|<1, L W_lambda>| with L phi = -Delta phi - (5+mu) K W^(4+mu) phi."""
    p = 5 + cfg.mu

    def g(X):
        e = evaluate(cfg, K, X, ["W", "W_lam", "lap_lam"])
        return -e["lap_lam"] - p * _radial_K(K, X) * np.abs(e["W"]) ** (p - 1) * e["W_lam"]
    return abs(float(integrate_ball(g, cfg, spec, symmetric=True).value))


# ---------------------------------------------------------------------------
# scaling studies
# ---------------------------------------------------------------------------


@dataclass
class ScalingRow:
    mu: float
    lam: float
    sigma: float
    value: float
    bound: float
    ratio: float
    ok: bool = True
    note: str = ""


@dataclass
class ScalingReport:
    quantity_name: str
    rows: list[ScalingRow]
    fitted_exponent: float
    fitted_constant: float
    passed: bool
    margin: float = 10.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d

    @property
    def ratio_spread(self) -> float:
        r = [row.ratio for row in self.rows if row.ok and row.ratio > 0]
        return max(r) / min(r) if r else math.inf


def fit_power_law(mus, values) -> tuple[float, float]:
    """Least-squares fit ln(value) = ln C + p ln(mu) over positive values."""
    mus = np.asarray(mus, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = values > 0
    if keep.sum() < 2:
        return math.nan, math.nan
    p, c = np.polyfit(np.log(mus[keep]), np.log(values[keep]), 1)
    return float(p), float(math.exp(c))


QUANTITIES = ("E_limit", "gradE_limit", "F_weighted_norm", "gram_deviation", "gram_deviation_5",
              "dJ_dlambda_dev", "dJ_dsigma_dev", "LWt_pairing")


def _bound(quantity, mu, rho):
    lm = abs(math.log(mu))
    if quantity in ("E_limit", "gradE_limit", "gram_deviation", "gram_deviation_5"):
        return math.sqrt(mu)
    if quantity == "F_weighted_norm":
        return mu ** (min(0.0, 2.0 - rho) / 2 - 2) * lm
    return math.sqrt(mu) * lm


def scaling_study(quantity: str, mu_list=DEFAULT_MU_SWEEP, sigma: float | None = None,
                  lam: float | None = None, K: RadialCoefficient | None = None, rho: float = 0.5,
                  spec: QuadratureSpec = ANALYSIS_SPEC, margin: float = 10.0) -> ScalingReport:
    """Evaluate a diagnostic over a mu sweep and compare it with its O(.) bound.

    Parameters
    ----------
    quantity : str
        One of ``QUANTITIES``.  ``F_weighted_norm`` measures ||F||_(rho+2)
        against mu^(min(0, 2-rho)/2 - 2) |ln mu|; ``gram_deviation`` is the
        distance of M to diag(a1, a2) and ``gram_deviation_5`` the distance
        to 5 diag(a1, a2); the remaining quantities are compared with
        sqrt(mu) or sqrt(mu) |ln mu|.
    mu_list : sequence of float
        At least three decreasing values, each <= 0.12.
    sigma, lam : float, optional
        Default to the root (sigma*, lambda*) of the reduced system.
    K : RadialCoefficient, optional
        Defaults to the Henon coefficient with alpha = 1.

    Returns
    -------
    ScalingReport
        ``passed`` is true when every row succeeded and the largest
        value/bound ratio is at most ``margin`` times the median ratio.
    """
    if quantity not in QUANTITIES:
        raise ValueError(f"unknown quantity {quantity!r}; choose from {QUANTITIES}")
    mu_list = [float(m) for m in mu_list]
    if len(mu_list) < 3 or any(b >= a for a, b in zip(mu_list, mu_list[1:])):
        raise ValueError("mu_list needs at least three strictly decreasing values")
    if any(not 0 < m <= 0.12 for m in mu_list):
        raise ValueError("every mu must lie in (0, 0.12]")
    K = K or RadialCoefficient.henon(1.0)
    consts = solve_reduced_system(K.kprime1)
    sigma = consts.sigma_star if sigma is None else sigma
    lam = consts.lambda_star if lam is None else lam

    rows = []
    for mu in mu_list:
        bound = _bound(quantity, mu, rho)
        try:
            cfg = PeakConfig(mu, lam, sigma, theorem_k(mu), theorem_mode=True,
                             star=(consts.lambda_star, consts.sigma_star))
            value = _measure(quantity, cfg, K, consts, rho, spec)
            ok = math.isfinite(value)
            note = "" if ok else "non-finite value"
        except (ArithmeticError, ValueError) as exc:
            value, ok, note = math.nan, False, f"{type(exc).__name__}: {exc}"
        rows.append(ScalingRow(mu, lam, sigma, value, bound, value / bound, ok, note))

    good = [r for r in rows if r.ok]
    p, c = fit_power_law([r.mu for r in good], [r.value for r in good])
    ratios = np.array([r.ratio for r in good])
    passed = (len(good) == len(rows) and len(good) > 0
              and float(ratios.max()) <= margin * float(np.median(ratios)))
    return ScalingReport(quantity, rows, p, c, passed, margin)


def _measure(quantity, cfg, K, consts, rho, spec) -> float:
    if quantity == "E_limit":
        return E_limit_deviation(cfg)
    if quantity == "gradE_limit":
        return gradE_limit_deviation(cfg)
    if quantity == "F_weighted_norm":
        return residual_weighted_norm(cfg, K, rho + 2, sup_samples(cfg, spec=spec))
    if quantity == "gram_deviation":
        return gram_matrix(cfg, K, spec).deviation(consts.a1, consts.a2)
    if quantity == "gram_deviation_5":
        return gram_matrix(cfg, K, spec).deviation(consts.a1, consts.a2, scale=5.0)
    if quantity == "LWt_pairing":
        return LW_lambda_pairing(cfg, K, spec)
    dl, ds = energy_derivatives(cfg, K, spec)
    if quantity == "dJ_dlambda_dev":
        return abs(dl - consts.A2 * L_value(cfg.sigma) / cfg.lam ** 2)
    return abs(ds - (K.kprime1 * consts.A1 - consts.A2 * L_prime_value(cfg.sigma) / cfg.lam))


# ---------------------------------------------------------------------------
# weight and distance inequalities
# ---------------------------------------------------------------------------


def _random_ball(rng, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.random(n)[:, None] ** (1 / 3)


def weight_property_suite(cfg: PeakConfig, samples: int = 2000, seed: int = 0,
                            with_integral: bool = False) -> dict:
    """Measure the constants in the weight and distance inequalities.

    Points are drawn uniformly in the ball and, for half of them, near the
    peak ring.  Returned entries (all should be finite and independent of mu):

    ``C0``
        min sqrt(mu) d_i over points outside the sector of peak i.
    ``C1``
        max d_i*/d_i over the same points.
    ``min_gap``
        min (d_i* - d_i) over all points, which must be >= 0.
    ``C_image_diff``
        max sqrt(mu) d_i*^(rho+1) |d_i^-rho - d_i*^-rho| outside the sector (rho = 1).
    ``C2``
        min sqrt(mu) d_i* over points inside the sector of peak i.
    ``interp_C``
        max omega_rho / omega_l^(rho/l) over (rho, l) in {(1, 1/2), (3/2, 1), (5/2, 1/2)}.
    ``omega_half_sup``
        sup omega_(1/2).
    ``omega_star_C``
        sup omega*_(3/4) / mu^(1/4).
    ``A2_C`` (only with ``with_integral``)
        int omega_(5/2)(y)/|x - y| dy / eps^2 divided by omega_(1/2)(x) at x = r m_0.
        The eps^(3 - l) normalisation (l = 1 here) is the one that makes the
        integral scale-free in the bubble variable y/eps.
    """
    if samples < 100:
        raise ValueError("weight_property_suite needs at least 100 samples")
    rng = np.random.default_rng(seed)
    n1 = samples // 2
    X = _random_ball(rng, n1)
    ring_t = rng.uniform(0, 2 * np.pi, samples - n1)
    ring_r = cfg.r + math.sqrt(cfg.mu) * rng.uniform(-3, 1, samples - n1) * cfg.sigma
    ring_z = math.sqrt(cfg.mu) * rng.normal(size=samples - n1)
    Y = np.stack([ring_r * np.cos(ring_t), ring_r * np.sin(ring_t), ring_z], axis=1)
    Y = Y[np.linalg.norm(Y, axis=1) < 1]
    P = np.concatenate([X, Y])

    sq = math.sqrt(cfg.mu)
    d, ds = bc.distances(cfg, P)
    sector = bc.peak_locations(cfg.k).sector_of(P)
    inside = np.zeros_like(d, dtype=bool)
    inside[np.arange(len(P)), sector] = True
    out = ~inside
    rho = 1.0
    img = sq * ds ** (rho + 1) * np.abs(d ** -rho - ds ** -rho)
    w = {q: bc.weight(cfg, q, P) for q in (0.5, 1.0, 1.5, 2.5)}
    interp = max(float(np.max(w[a] / w[b] ** (a / b))) for a, b in ((1.0, 0.5), (1.5, 1.0), (2.5, 0.5)))
    report = {
        "mu": cfg.mu,
        "C0": float(np.min(sq * d[out])),
        "C1": float(np.max(ds[out] / d[out])),
        "min_gap": float(np.min(ds - d)),
        "C_image_diff": float(np.max(img[out])),
        "C2": float(np.min(sq * ds[inside])),
        "interp_C": interp,
        "omega_half_sup": float(np.max(w[0.5])),
        "omega_star_C": float(np.max(bc.weight(cfg, 0.75, P, starred=True))) / cfg.mu ** 0.25,
    }
    if with_integral:
        report["A2_C"] = _a2_constant(cfg)
    return report


def _a2_constant(cfg: PeakConfig) -> float:
    x0 = np.array([cfg.r, 0.0, 0.0])
    spec = QuadratureSpec(n_radial=8, n_panels=5, n_angular=20, refinement_levels=0)

    def g(Y):
        return bc.weight(cfg, 2.5, Y) / np.linalg.norm(Y - x0, axis=1)
    val = integrate_ball(g, cfg, spec, symmetric=False).value / cfg.epsilon ** 2
    return float(val / bc.weight(cfg, 0.5, x0))


def weight_stability(mu_list=(1e-2, 1e-3), samples: int = 2000, seed: int = 0,
                       K: RadialCoefficient | None = None, spread: float = 10.0) -> dict:
    """Run the property suite over a mu sweep and test that every constant is
    finite and varies by at most ``spread`` across the sweep."""
    K = K or RadialCoefficient.henon(1.0)
    reports = [weight_property_suite(PeakConfig.theorem(mu, K), samples, seed) for mu in mu_list]
    keys = [k for k in reports[0] if k not in ("mu", "min_gap")]
    stable = {}
    for key in keys:
        vals = np.array([r[key] for r in reports])
        ok = bool(np.all(np.isfinite(vals)) and np.all(vals > 0) and vals.max() <= spread * vals.min())
        stable[key] = ok
    gaps_ok = all(r["min_gap"] >= -1e-9 for r in reports)
    return {"reports": reports, "stable": stable, "passed": gaps_ok and all(stable.values())}

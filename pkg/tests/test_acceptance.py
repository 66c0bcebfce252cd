"""One test per acceptance criterion, at the stated tolerance and runtime.

Each test records a PASS/FAIL line (printed in the terminal summary and to
stdout) before asserting, so a failing criterion still reports its numbers.
"""
import math
import time
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from peakball import bubble as bc
from peakball.bubble import PeakConfig, RadialCoefficient, evaluate, theorem_k
from peakball.grid import SectorField, build_sector_grid
from peakball.lattice import (
    L_prime_value, L_value, constant_A1, constant_A2, constant_a2, solve_reduced_system,
    solve_sigma_star,
)
from peakball.residual import (
    E_limit_deviation, weight_stability, energy_derivatives, energy_fd_derivatives,
    fit_power_law, gradE_limit_deviation, gram_matrix, residual_weighted_norm, sup_samples,
)

SWEEP = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4)
K1 = RadialCoefficient.henon(1.0)


def record(name, ok, detail):
    line = f"{name}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def star():
    return solve_reduced_system(1.0)


def theorem_cfg(mu, star):
    return PeakConfig(mu, star.lambda_star, star.sigma_star, theorem_k(mu))


def test_criterion_1_constants():
    t = time.perf_counter()
    A1, A2, a2 = constant_A1(), constant_A2(), constant_a2()
    dt = time.perf_counter() - t
    e1 = abs(A1 / (3 ** 1.5 * math.pi ** 2 / 24) - 1)
    e2 = abs(A2 / (math.sqrt(3) * math.pi) - 1)
    e3 = abs(a2 / (3 * math.sqrt(3) * math.pi ** 2 / 64) - 1)
    ok = max(e1, e2, e3) <= 1e-8 and dt < 1.0
    record("C1 constants", ok, f"rel err A1 {e1:.1e} A2 {e2:.1e} a2 {e3:.1e}; {dt:.2f} s")


def _brute_L(sigmas, J=10 ** 6):
    a = math.pi * np.arange(1, J + 1, dtype=float)
    out = []
    for s in sigmas:
        q = np.sqrt(a * a + s * s)
        out.append(-1 / s + 2 * np.sum(s * s / (a * q * (a + q))))
    return np.array(out)


def test_criterion_2_reduced_system():
    t = time.perf_counter()
    s = solve_sigma_star()
    resid = abs(L_value(s))
    # dense scan with 1e5 terms (tail < 3e-11, far below the 1e-3 L' step),
    # then the bracketing pair confirmed with 1e6 terms
    grid = np.round(np.arange(3.3, 3.7 + 5e-4, 1e-3), 12)
    vals = _brute_L(grid, 10 ** 5)
    idx = np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]
    bracket = None
    if len(idx) == 1:
        lo, hi = _brute_L(grid[idx[0]:idx[0] + 2])
        if lo < 0 < hi:
            bracket = (float(grid[idx[0]]), float(grid[idx[0] + 1]))
    dt = time.perf_counter() - t
    ok = (resid <= 1e-10 and bracket is not None and bracket[0] <= s <= bracket[1]
          and 3.3 <= s <= 3.7 and dt < 10)
    record("C2 reduced system", ok, f"sigma* = {s:.12f}, |L| = {resid:.1e}, brute bracket {bracket}; {dt:.1f} s")


def test_criterion_3_E_limit(star):
    t = time.perf_counter()
    cfgs = [theorem_cfg(mu, star) for mu in SWEEP]
    e = [E_limit_deviation(c) for c in cfgs]
    g = [gradE_limit_deviation(c) for c in cfgs]
    pe, _ = fit_power_law(SWEEP, e)
    pg, _ = fit_power_law(SWEEP, g)
    dt = time.perf_counter() - t
    ok = pe >= 0.45 and pg >= 0.45 and dt < 30
    record("C3 E-limit", ok, f"exponent |E - L/2| {pe:.3f}, |grad analogue| {pg:.3f}; {dt:.1f} s")


def test_criterion_4_residual_scaling(star):
    t = time.perf_counter()
    scaled = []
    for mu in SWEEP:
        c = theorem_cfg(mu, star)
        F = residual_weighted_norm(c, K1, 2.5, sup_samples(c))
        scaled.append(mu ** 2 * F / abs(math.log(mu)))
    spread = max(scaled) / min(scaled)
    dt = time.perf_counter() - t
    ok = spread < 10 and dt < 300
    vals = ", ".join(f"{v:.3g}" for v in scaled)
    record("C4 residual scaling", ok, f"mu^2 ||F||_5/2 / |ln mu| = [{vals}], spread {spread:.1f}x; {dt:.0f} s")


def test_criterion_5_gram(star):
    t = time.perf_counter()
    devs, devs5 = [], []
    for mu in SWEEP:
        M = gram_matrix(theorem_cfg(mu, star), K1)
        devs.append(M.deviation(star.a1, star.a2))
        devs5.append(M.deviation(star.a1, star.a2, scale=5.0))
    p, _ = fit_power_law(SWEEP, devs)
    p5, _ = fit_power_law(SWEEP, devs5)
    at3 = devs[SWEEP.index(1e-3)]
    lim = 0.2 * min(star.a1, star.a2)
    dt = time.perf_counter() - t
    ok = at3 <= lim and p >= 0.4 and dt < 300
    record("C5 Gram matrix", ok,
           f"dev at 1e-3 {at3:.4g} (limit {lim:.4g}), exponent {p:.3f}; "
           f"against 5 diag(a1, a2): dev {devs5[SWEEP.index(1e-3)]:.4g}, exponent {p5:.3f}; {dt:.0f} s")


def test_criterion_6_energy_derivatives(star):
    t = time.perf_counter()
    c = theorem_cfg(1e-3, star)
    dl, ds = energy_derivatives(c, K1)
    expect = K1.kprime1 * star.A1 - star.A2 * L_prime_value(c.sigma) / c.lam
    dev = abs(ds - expect)
    lim = 0.1 * K1.kprime1 * star.A1
    fl, fs = energy_fd_derivatives(c, K1)
    fd_rel = max(abs(fs - ds) / abs(ds), abs(fl - dl) / max(abs(dl), abs(ds)))
    dt = time.perf_counter() - t
    ok_a, ok_b = dev <= lim, fd_rel <= 1e-4
    detail = (f"|dJ/dsigma - limit| = {dev:.4g} (limit {lim:.4g}) {'ok' if ok_a else 'exceeds'}; "
              f"FD vs pairing rel {fd_rel:.1e} {'ok' if ok_b else 'exceeds'}; {dt:.0f} s")
    record("C6 energy derivatives", ok_a and ok_b and dt < 300, detail)


def test_criterion_7_constrained_solver(star):
    from peakball.solver import BorderedSolver, discrete_residual, linearized_matrix

    t = time.perf_counter()
    ratios, recov = [], []
    for mu in (1e-2, 1e-3):
        c = theorem_cfg(mu, star)
        grid = build_sector_grid(c.k, 48, 12, 48)
        solver = BorderedSolver(grid, c, K1)
        e = evaluate(c, K1, grid.points, ["lap_lam", "lap_sig"])
        G = np.stack([e["lap_lam"], e["lap_sig"]], axis=1)
        # manufactured solution: admissible phi and prescribed multipliers
        r2 = np.sum(grid.points ** 2, axis=1)
        phi = (1 - r2) * np.cos(3 * grid.points[:, 0]) * (1 + grid.points[:, 2] ** 2)
        gram = G.T @ (grid.volumes[:, None] * G)
        phi -= G @ np.linalg.solve(gram, G.T @ (grid.volumes * phi))
        cc = np.array([0.7, -0.2])
        res = solver.solve(linearized_matrix(grid, c, K1, solver.W) @ phi - G @ cc)
        recov.append(max(np.max(np.abs(res.phi.values - phi)) / np.max(np.abs(phi)),
                         abs(res.c1 - cc[0]) / abs(cc[0]), abs(res.c2 - cc[1]) / abs(cc[1])))
        # a priori bound with f = F_h
        f = discrete_residual(grid, c, K1, solver.W)
        sol = solver.solve(f)
        num = bc.weighted_sup_norm(grid.points, sol.phi.values, c, 0.5)
        den = mu ** 2 * bc.weighted_sup_norm(grid.points, f, c, 2.5)
        ratios.append(num / den)
    # an a priori bound: the ratio must not grow as mu decreases
    growth = ratios[1] / ratios[0]
    dt = time.perf_counter() - t
    ok = max(recov) <= 1e-8 and all(math.isfinite(r) for r in ratios) and growth <= 10 and dt < 600
    record("C7 constrained solver", ok,
           f"recovery err {max(recov):.1e}; ||phi||_1/2 / (mu^2 ||f||_5/2) = "
           f"{ratios[0]:.3g}, {ratios[1]:.3g} (growth {growth:.3g}x); {dt:.0f} s")


@pytest.mark.slow
def test_criterion_8_exploratory_solve():
    from peakball.cli import EXPLORATORY_ACCEPT, EXPLORATORY_LAMBDA, EXPLORATORY_RADIUS, EXPLORATORY_START
    from peakball.solver import SolverError, match_parameters, newton_full

    t = time.perf_counter()
    mu = 0.1
    sq = math.sqrt(mu)
    grid = build_sector_grid(3, 64, 16, 64)
    box = (EXPLORATORY_LAMBDA, ((1 - EXPLORATORY_RADIUS[1]) / sq, (1 - EXPLORATORY_RADIUS[0]) / sq))
    start = (EXPLORATORY_START[0], (1 - EXPLORATORY_START[1]) / sq)
    try:
        m = match_parameters(grid, K1, mu, search_box=box, start=start, theorem_mode=False,
                             accept_tol=EXPLORATORY_ACCEPT)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            u, rep = newton_full(grid, K1, mu, init="reduced", match=m)
    except SolverError as exc:
        dt = time.perf_counter() - t
        record("C8 exploratory solve", False, f"{type(exc).__name__}: {exc}; {dt:.0f} s")
        return
    dt = time.perf_counter() - t
    h = grid.h[0]
    radii = [float(np.linalg.norm(p)) for p, _ in rep.peak_list]
    ok = (rep.residual_drop >= 1e6 and rep.min_value > 0 and len(rep.peak_list) == 3
          and all(abs(r - m.cfg.r) <= 2 * h for r in radii) and rep.exploratory and dt < 1200)
    height_note = "height warning" if any("peak height" in str(w.message) for w in caught) else "height within 25%"
    record("C8 exploratory solve", ok,
           f"lambda {m.lambda_hat:.4f}, r {m.cfg.r:.4f}, |c| {m.c_norm:.1e}; drop {rep.residual_drop:.2e}, min {rep.min_value:.2e}, "
           f"{len(rep.peak_list)} peaks at radii {[round(r, 4) for r in radii]}; {height_note}; {dt:.0f} s")


def test_criterion_9_invariants(star):
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_sym = 0.0
    worst_id = 0.0
    worst_bnd = 0.0
    worst_fd = 0.0
    gap_ok = True
    for mu in (1e-2, 1e-3):
        c = theorem_cfg(mu, star)
        v = rng.normal(size=(500, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        x = v * (0.999 * rng.random(500) ** (1 / 3))[:, None]
        base = {"W": bc.ansatz(c, K1, x), "F": bc.residual_F(c, K1, x), "E": bc.interaction_E(c, x)}
        for name, img in (("rot", bc.rotate(x, c.k)), ("x3", bc.reflect_x3(x)), ("conj", bc.conjugate(x))):
            vals = {"W": bc.ansatz(c, K1, img), "F": bc.residual_F(c, K1, img)}
            if name != "rot":  # E is the sum anchored at peak 0
                vals["E"] = bc.interaction_E(c, img)
            for key, val in vals.items():
                worst_sym = max(worst_sym, np.max(np.abs(val - base[key])) / np.max(np.abs(base[key])))
        worst_bnd = max(worst_bnd, np.max(np.abs(bc.ansatz(c, K1, v))) / c.peak_height(K1))
        d, ds = bc.distances(c, x)
        gap_ok &= bool(np.all(ds >= d))
        lhs = ds ** 2 - d ** 2
        rhs = ((1 - np.sum(x * x, axis=1)) * (1 - c.r ** 2) / c.epsilon ** 2)[:, None]
        # the difference of squares cancels, so compare on the scale of d*^2
        worst_id = max(worst_id, np.max(np.abs(lhs - rhs) / ds ** 2))
        for which, kw, base_v in (("lambda", "lam", c.lam), ("sigma", "sigma", c.sigma)):
            hstep = 1e-6 * base_v
            fd = (bc.ansatz(c.with_params(**{kw: base_v + hstep}), K1, x[:50])
                  - bc.ansatz(c.with_params(**{kw: base_v - hstep}), K1, x[:50])) / (2 * hstep)
            an = bc.ansatz_param_deriv(c, K1, which, x[:50])
            worst_fd = max(worst_fd, np.max(np.abs(an - fd)) / np.max(np.abs(fd)))
    stab = weight_stability((1e-2, 1e-3))
    dt = time.perf_counter() - t
    ok = worst_sym <= 1e-12 and worst_id <= 1e-12 and worst_bnd <= 1e-10 and gap_ok and worst_fd <= 1e-4 and stab["passed"] and dt < 60
    record("C9 invariants", ok,
           f"symmetry {worst_sym:.1e}, image identity {worst_id:.1e}, boundary {worst_bnd:.1e}, d* >= d {gap_ok}, "
           f"FD {worst_fd:.1e}, weight constants stable {stab['passed']}; {dt:.1f} s")

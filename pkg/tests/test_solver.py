import csv
import math

import numpy as np
import pytest

from peakball.bubble import PeakConfig, RadialCoefficient, evaluate, signed_power
from peakball.grid import SectorField, build_sector_grid
from peakball.solver import (
    BorderedSolver, NonContraction, apply_linearized, discrete_residual, linearized_matrix,
    newton_full, pde_residual, peak_census, projected_nonlinear_solve, solve_constrained_linear,
    use_direct, write_node_dump,
)

K1 = RadialCoefficient.henon(1.0)
MU = 0.1
CFG = PeakConfig(MU, 1.0, (1 - 0.4) / math.sqrt(MU), 3)


@pytest.fixture(scope="module")
def grid():
    return build_sector_grid(3, 24, 8, 24)


@pytest.fixture(scope="module")
def solver(grid):
    return BorderedSolver(grid, CFG, K1, "direct")


def _directions(grid):
    e = evaluate(CFG, K1, grid.points, ["lap_lam", "lap_sig"])
    return e["lap_lam"], e["lap_sig"]


def test_constraint_direction_rhs(grid, solver):
    g1, _ = _directions(grid)
    res = solver.solve(g1)
    assert res.c1 == pytest.approx(-1.0, abs=1e-10)
    assert abs(res.c2) <= 1e-10
    assert np.max(np.abs(res.phi.values)) <= 1e-10 * np.max(np.abs(g1))


def test_manufactured_solution(grid, solver):
    g1, g2 = _directions(grid)
    rng = np.random.default_rng(0)
    r2 = np.sum(grid.points ** 2, axis=1)
    phi = (1 - r2) * (1 + grid.points[:, 0] + rng.normal(scale=0.1, size=grid.n))
    # make phi admissible: orthogonal to both directions in <.,.>_h
    G = np.stack([g1, g2], axis=1)
    gram = G.T @ (grid.volumes[:, None] * G)
    phi = phi - G @ np.linalg.solve(gram, G.T @ (grid.volumes * phi))
    c = np.array([0.3, -1.7])
    f = linearized_matrix(grid, CFG, K1) @ phi - G @ c
    res = solver.solve(f)
    assert np.max(np.abs(res.phi.values - phi)) <= 1e-8 * np.max(np.abs(phi))
    assert res.c1 == pytest.approx(c[0], rel=1e-8)
    assert res.c2 == pytest.approx(c[1], rel=1e-8)


def test_orthogonality(grid, solver):
    f = discrete_residual(grid, CFG, K1)
    res = solver.solve(f)
    g1, g2 = _directions(grid)
    for g, o in zip((g1, g2), res.orthogonality):
        scale = grid.norm(res.phi.values) * grid.norm(g)
        assert o <= 1e-10 * scale
        assert abs(grid.inner(res.phi.values, g)) <= 1e-10 * scale


def test_krylov_path_matches_direct(grid, solver):
    f = discrete_residual(grid, CFG, K1)
    a = solver.solve(f)
    b = BorderedSolver(grid, CFG, K1, "krylov").solve(f)
    assert b.c1 == pytest.approx(a.c1, rel=1e-7)
    assert b.c2 == pytest.approx(a.c2, rel=1e-7)
    assert grid.norm(a.phi.values - b.phi.values) <= 1e-7 * grid.norm(a.phi.values)


def test_solve_constrained_linear_wrapper(grid):
    f = discrete_residual(grid, CFG, K1)
    res = solve_constrained_linear(grid, CFG, K1, f)
    assert math.isfinite(res.c1) and math.isfinite(res.c2)
    with pytest.raises(ValueError):
        solve_constrained_linear(grid, CFG, K1, np.full(grid.n, np.nan))


def test_zero_rhs(solver, grid):
    res = solver.solve(np.zeros(grid.n))
    assert res.c1 == 0 and res.c2 == 0 and not res.phi.values.any()


def test_apply_linearized_zero_and_linear(grid):
    assert not apply_linearized(grid, CFG, K1, np.zeros(grid.n)).values.any()
    u = np.random.default_rng(1).normal(size=grid.n)
    a = apply_linearized(grid, CFG, K1, 2 * u).values
    b = apply_linearized(grid, CFG, K1, SectorField(grid, u)).values
    np.testing.assert_allclose(a, 2 * b, rtol=1e-12, atol=1e-12 * np.max(np.abs(a)))


def test_residual_relation(grid):
    W = evaluate(CFG, K1, grid.points, ["W"])["W"]
    np.testing.assert_allclose(discrete_residual(grid, CFG, K1, W), -pde_residual(grid, K1, MU, W), atol=1e-9)


def test_projected_newton_gives_exact_reduced_equation(grid):
    res = projected_nonlinear_solve(grid, CFG, K1, method="newton", tol=1e-10)
    W = evaluate(CFG, K1, grid.points, ["W"])["W"]
    g1, g2 = _directions(grid)
    lhs = pde_residual(grid, K1, MU, W + res.phi.values)
    rhs = res.c1 * g1 + res.c2 * g2
    assert grid.norm(lhs - rhs) <= 1e-8 * grid.norm(discrete_residual(grid, CFG, K1, W))
    assert abs(grid.inner(res.phi.values, g1)) <= 1e-10 * grid.norm(res.phi.values) * grid.norm(g1)


def test_picard_reports_non_contraction_or_converges(grid):
    try:
        res = projected_nonlinear_solve(grid, CFG, K1, method="picard", max_iter=60)
    except NonContraction as exc:
        assert exc.history
    else:
        assert res.history[-1] <= 1e-10 * max(1.0, grid.norm(res.phi.values))


def test_newton_from_exact_solution_takes_no_step(grid):
    # build a discrete solution of -Delta_h u = K g(u) + s by choosing the source
    u = evaluate(CFG, K1, grid.points, ["W"])["W"]
    Kx = K1.value(np.linalg.norm(grid.points, axis=1))
    assert np.allclose(pde_residual(grid, K1, MU, u), -(grid.laplacian @ u) - Kx * signed_power(u, 5 + MU))
    field, rep = newton_full(grid, K1, MU, init=u, cfg=CFG, tol=1e300)
    assert rep.iterations == 0
    assert rep.exploratory


def test_newton_rejects_bad_init(grid):
    with pytest.raises(ValueError):
        newton_full(grid, K1, MU, init=np.zeros(3), cfg=CFG)
    with pytest.raises(ValueError):
        newton_full(grid, K1, MU, init="nope", cfg=CFG)


def test_peak_census(grid):
    W = evaluate(CFG, K1, grid.points, ["W"])["W"]
    peaks = peak_census(SectorField(grid, W))
    assert len(peaks) == 3
    for p, h in peaks:
        assert abs(np.linalg.norm(p) - CFG.r) <= 2 / 24
        assert abs(p[2]) <= 1e-12
    assert peak_census(SectorField(grid, np.ones(grid.n))) == []
    assert len(peak_census(SectorField(grid, W), unfold_peaks=False)) == 1


def test_peak_census_rejects_nan(grid):
    with pytest.raises(ValueError):
        peak_census(SectorField(grid, np.full(grid.n, np.nan)))


def test_use_direct(grid):
    assert use_direct(grid, "auto")
    assert not use_direct(grid, "krylov")
    with pytest.raises(ValueError):
        use_direct(grid, "magic")


def test_node_dump(grid, tmp_path):
    path = tmp_path / "nodes.csv"
    write_node_dump(SectorField(grid, np.arange(grid.n, dtype=float)), path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["node", "s", "theta", "y", "x1", "x2", "x3", "value"]
    assert len(rows) == grid.n + 1
    assert float(rows[5][-1]) == 4.0

import math

import numpy as np
import pytest
from scipy.sparse.linalg import eigs, spsolve

from peakball.grid import AXIS, CUT, SectorField, build_sector_grid, unfold


@pytest.fixture(scope="module")
def grid32():
    return build_sector_grid(3, 32, 8, 32)


def test_laplacian_exact_on_quadratic(grid32):
    u = grid32.sample(lambda X: 1 - np.sum(X * X, axis=1))
    np.testing.assert_allclose(grid32.laplacian @ u, -6.0, rtol=1e-9)


@pytest.mark.parametrize("k", [2, 3, 5])
def test_quadratic_exact_other_sectors(k):
    g = build_sector_grid(k, 16, 8, 16)
    u = g.sample(lambda X: 1 - np.sum(X * X, axis=1))
    np.testing.assert_allclose(g.laplacian @ u, -6.0, rtol=1e-9)


def test_sector_volume(grid32):
    assert grid32.sector_volume == pytest.approx(math.pi / 9)
    assert grid32.volumes.sum() == pytest.approx(grid32.sector_volume, rel=1e-2)
    assert np.all(grid32.volumes > 0)


def test_poisson_converges():
    # -Delta u = 6 has u = 1 - |x|^2; a non-polynomial check uses u = cos(pi |x| / 2)
    errs = []
    for n in (16, 32):
        g = build_sector_grid(3, n, 8, n)
        r = np.linalg.norm(g.points, axis=1)
        exact = np.cos(0.5 * math.pi * r)
        # -Delta cos(pi r / 2) = (pi/2)^2 cos + (pi / r) sin(pi r / 2)
        f = (0.5 * math.pi) ** 2 * exact + np.where(r > 0, math.pi * np.sin(0.5 * math.pi * r) / np.maximum(r, 1e-300),
                                                  0.5 * math.pi ** 2)
        u = spsolve(-g.laplacian.tocsc(), f)
        errs.append(np.max(np.abs(u - exact)))
    assert errs[1] < errs[0] / 3
    assert errs[1] < 1e-2


def test_first_eigenvalue(grid32):
    val = eigs(-grid32.laplacian.tocsc(), k=1, sigma=0, return_eigenvectors=False)[0]
    assert abs(val.imag) < 1e-8
    assert val.real == pytest.approx(math.pi ** 2, rel=0.05)


def test_flags_and_inner(grid32):
    assert np.any(grid32.flags & AXIS)
    assert np.any(grid32.flags & CUT)
    assert np.all(np.linalg.norm(grid32.points, axis=1) < 1)
    one = np.ones(grid32.n)
    assert grid32.inner(one, one) == pytest.approx(grid32.volumes.sum())
    assert grid32.norm(one) == pytest.approx(math.sqrt(grid32.volumes.sum()))
    assert grid32.h == (1 / 32, math.pi / 3 / 8, 1 / 32)


def test_sector_field_shape(grid32):
    SectorField(grid32, np.zeros(grid32.n))
    with pytest.raises(ValueError):
        SectorField(grid32, np.zeros(3))


@pytest.mark.parametrize("k", [3, 7])
def test_unfold_orbits(k):
    # generic point: 2 reflections x conjugation x k rotations
    assert len(unfold([[0.3, 0.1, 0.2]], k)) == 4 * k
    # point on the peak ring: only the k peaks
    assert len(unfold([[0.5, 0.0, 0.0]], k)) == k
    assert len(unfold([[0.0, 0.0, 0.0]], k)) == 1

"""Finite-difference grid on the fundamental sector of the symmetric ball.

Functions invariant under rotation by 2 pi/k about the x3-axis, the
reflection x2 -> -x2 and the reflection x3 -> -x3 are determined by their
values on the wedge

    0 <= s <= 1,  0 <= theta <= pi/k,  0 <= y,  s^2 + y^2 < 1

in cylindrical coordinates x = (s cos theta, s sin theta, y).  The Laplacian

    u_ss + u_s / s + u_theta,theta / s^2 + u_yy

is discretised on a uniform (s, theta, y) tensor grid.  Mirror ghosts close
the stencil on theta = 0, theta = pi/k and y = 0.  Arms that cross the sphere
are shortened to end on it (Shortley-Weller), with boundary value 0.  On the
axis s = 0 a single node per y level carries the planar Laplacian
4 (mean_theta u(h) - u(0)) / h^2.  The scheme is exact for quadratics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

AXIS = 1
THETA0 = 2
THETAK = 4
Y0 = 8
CUT = 16  # at least one stencil arm ends on the sphere

_INSIDE_TOL = 1e-12


@dataclass
class SectorGrid:
    """Sector grid with its discrete Laplacian.

    Attributes
    ----------
    k, n_s, n_theta, n_y : int
        Symmetry order and number of intervals in s, theta and y.
    ijl : (n, 3) int array
        Grid indices of the unknown nodes (axis nodes have i = j = 0).
    s, theta, y : (n,) arrays
        Cylindrical coordinates of the nodes.
    points : (n, 3) array
        Cartesian coordinates.
    volumes : (n,) array
        Cell volumes; they define the inner product <u, v>_h = sum V u v.
    flags : (n,) int array
        Bit mask of AXIS, THETA0, THETAK, Y0 and CUT.
    laplacian : scipy.sparse.csr_matrix
        Discrete Laplacian acting on nodal values (zero boundary data).
    """

    k: int
    n_s: int
    n_theta: int
    n_y: int
    ijl: np.ndarray
    s: np.ndarray
    theta: np.ndarray
    y: np.ndarray
    points: np.ndarray
    volumes: np.ndarray
    flags: np.ndarray
    laplacian: sp.csr_matrix
    index: np.ndarray = field(repr=False)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.s)

    @property
    def h(self) -> tuple[float, float, float]:
        return 1.0 / self.n_s, math.pi / self.k / self.n_theta, 1.0 / self.n_y

    @property
    def sector_volume(self) -> float:
        """Exact measure of the fundamental sector, |B| / (4k)."""
        return 4.0 * math.pi / 3.0 / (4 * self.k)

    @property
    def interior(self) -> np.ndarray:
        """Nodes whose stencil does not touch the sphere."""
        return (self.flags & CUT) == 0

    def inner(self, u, v) -> float:
        return float(np.sum(self.volumes * u * v))

    def norm(self, u) -> float:
        return math.sqrt(self.inner(u, u))

    def sample(self, fun) -> np.ndarray:
        """Evaluate a pointwise function of Cartesian points at the nodes."""
        return np.asarray(fun(self.points), dtype=float)


def _rect_disk_moment(sa, sb, ya, yb):
    """int int s ds dy over [sa, sb] x [ya, yb] intersected with s^2 + y^2 < 1.

    The inner integral is (min(sb^2, 1 - y^2) - sa^2)_+ / 2, a piecewise
    quadratic in y with breaks at sqrt(1 - sb^2) and sqrt(1 - sa^2).
    """
    sa, sb, ya, yb = map(np.asarray, (sa, sb, ya, yb))
    b1 = np.sqrt(np.clip(1 - sb * sb, 0, None))
    b2 = np.sqrt(np.clip(1 - sa * sa, 0, None))
    cuts = np.sort(np.stack([ya, np.clip(b1, ya, yb), np.clip(b2, ya, yb), yb], axis=-1), axis=-1)
    xg, wg = np.polynomial.legendre.leggauss(3)
    total = np.zeros(np.shape(sa))
    for a, b in ((cuts[..., 0], cuts[..., 1]), (cuts[..., 1], cuts[..., 2]), (cuts[..., 2], cuts[..., 3])):
        half = 0.5 * (b - a)
        for xq, wq in zip(xg, wg):
            yq = a + half * (xq + 1)
            val = 0.5 * np.clip(np.minimum(sb * sb, 1 - yq * yq) - sa * sa, 0, None)
            total += half * wq * val
    return total


def build_sector_grid(k: int, n_s: int, n_theta: int, n_y: int) -> SectorGrid:
    """Assemble the sector grid and its Laplacian.

    Parameters
    ----------
    k : int
        Number of peaks (the sector spans pi/k in theta), k >= 2.
    n_s, n_theta, n_y : int
        Number of intervals in s, theta and y, each >= 8.
    """
    if int(k) != k or k < 2:
        raise ValueError(f"k must be an integer >= 2, got {k}")
    if min(n_s, n_theta, n_y) < 8:
        raise ValueError("grid resolutions must be >= 8")
    hs, ht, hy = 1.0 / n_s, math.pi / k / n_theta, 1.0 / n_y

    I, J, Lv = np.meshgrid(np.arange(n_s + 1), np.arange(n_theta + 1), np.arange(n_y + 1), indexing="ij")
    S, Y = I * hs, Lv * hy
    inside = S * S + Y * Y < 1 - _INSIDE_TOL
    keep = inside & ((I > 0) | (J == 0))
    index = -np.ones(I.shape, dtype=np.int64)
    index[keep] = np.arange(int(keep.sum()))
    # every theta on the axis refers to the single axis node
    index[0, :, :] = index[0, 0, :][None, :]
    n = int(keep.sum())
    ii, jj, ll = I[keep], J[keep], Lv[keep]
    s, th, y = ii * hs, jj * ht, ll * hy

    flags = np.zeros(n, dtype=np.int64)
    flags[ii == 0] |= AXIS
    flags[(jj == 0) & (ii > 0)] |= THETA0
    flags[(jj == n_theta) & (ii > 0)] |= THETAK
    flags[ll == 0] |= Y0

    rows, cols, vals = [], [], []

    def add(r, c, v):
        r = np.asarray(r)
        rows.append(r)
        cols.append(np.broadcast_to(c, r.shape))
        vals.append(np.broadcast_to(np.asarray(v, dtype=float), r.shape))

    node = np.arange(n)
    ax = ii == 0
    na = ~ax

    # --- s direction (off-axis nodes) -------------------------------------
    r_ = node[na]
    si, yi = s[na], y[na]
    iI, jI, lI = ii[na], jj[na], ll[na]
    plus_in = (iI + 1 <= n_s)
    nb_plus = np.full(len(r_), -1)
    nb_plus[plus_in] = index[np.minimum(iI + 1, n_s)[plus_in], jI[plus_in], lI[plus_in]]
    cut_s = nb_plus < 0
    hp = np.where(cut_s, np.sqrt(np.clip(1 - yi * yi, 0, None)) - si, hs)
    hm = np.full(len(r_), hs)
    nb_minus = index[iI - 1, jI, lI]
    ap = 2 / (hp * (hp + hm)) + hm / (si * hp * (hp + hm))
    am = 2 / (hm * (hp + hm)) - hp / (si * hm * (hp + hm))
    a0 = -2 / (hp * hm) + (hp - hm) / (si * hp * hm)
    add(r_, r_, a0)
    add(r_[~cut_s], nb_plus[~cut_s], ap[~cut_s])
    add(r_, nb_minus, am)
    flags[r_[cut_s]] |= CUT

    # --- theta direction ---------------------------------------------------
    c = 1.0 / (si * si * ht * ht)
    jm = np.where(jI == 0, 1, jI - 1)
    jp = np.where(jI == n_theta, n_theta - 1, jI + 1)
    add(r_, r_, -2 * c)
    add(r_, index[iI, jm, lI], c)
    add(r_, index[iI, jp, lI], c)

    # --- axis: planar Laplacian from the theta-mean at radius h -------------
    ra = node[ax]
    la, ya = ll[ax], y[ax]
    ring_in = index[1, 0, la] >= 0
    wt = np.full(n_theta + 1, 1.0 / n_theta)
    wt[0] = wt[-1] = 0.5 / n_theta
    for jx in range(n_theta + 1):
        add(ra[ring_in], index[1, jx, la[ring_in]], 4 * wt[jx] / hs ** 2)
    add(ra[ring_in], ra[ring_in], np.full(int(ring_in.sum()), -4 / hs ** 2))
    delta = np.sqrt(np.clip(1 - ya[~ring_in] ** 2, 0, None))
    add(ra[~ring_in], ra[~ring_in], -4 / delta ** 2)
    flags[ra[~ring_in]] |= CUT

    # --- y direction (all nodes) -----------------------------------------
    up_in = ll + 1 <= n_y
    nb_up = np.full(n, -1)
    nb_up[up_in] = index[ii[up_in], jj[up_in], np.minimum(ll + 1, n_y)[up_in]]
    cut_y = nb_up < 0
    hup = np.where(cut_y, np.sqrt(np.clip(1 - s * s, 0, None)) - y, hy)
    flags[cut_y] |= CUT
    bottom = ll == 0
    # y = 0: mirror ghost, both arms equal to hup
    add(node[bottom], node[bottom], -2 / hup[bottom] ** 2)
    ok = bottom & ~cut_y
    add(node[ok], nb_up[ok], 2 / hup[ok] ** 2)
    mid = ~bottom
    hm_y = np.full(n, hy)
    nb_dn = np.where(mid, index[ii, jj, np.maximum(ll - 1, 0)], -1)
    bp = 2 / (hup * (hup + hm_y))
    bm = 2 / (hm_y * (hup + hm_y))
    add(node[mid], node[mid], -(bp + bm)[mid])
    add(node[mid], nb_dn[mid], bm[mid])
    ok = mid & ~cut_y
    add(node[ok], nb_up[ok], bp[ok])

    Lap = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    Lap.sum_duplicates()

    # --- cell volumes --------------------------------------------------------
    ext_s = np.zeros(n, dtype=bool)
    ext_s[r_[cut_s]] = True
    sa = np.where(ax, 0.0, s - hs / 2)
    sb = np.where(ax, hs / 2, s + np.where(ext_s, hs, hs / 2))
    ya_ = np.maximum(y - hy / 2, 0.0)
    yb_ = y + np.where(cut_y, hy, hy / 2)
    wtheta = np.where(ax, math.pi / k, np.where((jj == 0) | (jj == n_theta), ht / 2, ht))
    volumes = wtheta * _rect_disk_moment(sa, sb, ya_, yb_)

    pts = np.stack([s * np.cos(th), s * np.sin(th), y], axis=1)
    return SectorGrid(k, n_s, n_theta, n_y, np.stack([ii, jj, ll], 1), s, th, y, pts, volumes,
                      flags, Lap, index)


@dataclass
class SectorField:
    """Nodal values on a SectorGrid."""

    grid: SectorGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} nodal values, got shape {self.values.shape}")


def unfold(points, k: int, tol: float = 1e-9) -> np.ndarray:
    """All distinct images of the points under the symmetry group of the ring."""
    from .bubble import conjugate, reflect_x3, rotate

    pts = np.atleast_2d(np.asarray(points, dtype=float))
    imgs = []
    for base in (pts, conjugate(pts)):
        for b in (base, reflect_x3(base)):
            for t in range(k):
                imgs.append(rotate(b, k, t))
    allp = np.concatenate(imgs)
    out = []
    for p in allp:
        if not any(np.linalg.norm(p - q) <= tol for q in out):
            out.append(p)
    return np.array(out)

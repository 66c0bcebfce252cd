"""Discrete reduction and full Newton solve on the sector grid.

The linearised operator is L phi = -Delta_h phi - (5+mu) K |W|^(4+mu) phi,
with W sampled from the closed-form ansatz.  The reduction directions enter
through the analytic Laplacians Delta W_lambda and Delta W_sigma sampled at
the nodes.  The projected problem uses the discrete residual
F_h = Delta_h W + K g(W), g(u) = |u|^(4+mu) u, so that vanishing multipliers
give an exact zero of the discrete equation G(u) = -Delta_h u - K g(u) solved
by :func:`newton_full`:

    L phi - F_h - N(phi) = -Delta_h (W + phi) - K g(W + phi).
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bubble import PeakConfig, RadialCoefficient, evaluate, nonlinear_N, signed_power, theorem_k
from .grid import SectorField, SectorGrid, unfold
from .lattice import solve_reduced_system

# above this many unknowns, Krylov with an AMG preconditioner replaces LU
DIRECT_MAX = 30_000
KRYLOV_RTOL = 1e-12


class SolverError(RuntimeError):
    """Base class for solver failures; ``history`` holds residual or step norms."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class SingularBorderedSystem(SolverError):
    pass


class NonContraction(SolverError):
    pass


class MatchingFailure(SolverError):
    def __init__(self, message, field_samples=None, history=None):
        super().__init__(message, history)
        self.field_samples = field_samples or []


class NewtonDivergence(SolverError):
    pass


def _radial_K(K, grid):
    return K.value(np.linalg.norm(grid.points, axis=1))


def _potential(grid, K, mu, u):
    p = 5 + mu
    return p * _radial_K(K, grid) * np.abs(u) ** (p - 1)


def linearized_matrix(grid: SectorGrid, cfg: PeakConfig, K: RadialCoefficient, W=None) -> sp.csr_matrix:
    if W is None:
        W = evaluate(cfg, K, grid.points, ["W"])["W"]
    return (-grid.laplacian - sp.diags(_potential(grid, K, cfg.mu, W))).tocsr()


def apply_linearized(grid: SectorGrid, cfg: PeakConfig, K: RadialCoefficient, phi) -> SectorField:
    """Nodal application of L = -Delta_h - (5+mu) K W^(4+mu)."""
    v = phi.values if isinstance(phi, SectorField) else np.asarray(phi, dtype=float)
    return SectorField(grid, linearized_matrix(grid, cfg, K) @ v)


def discrete_residual(grid: SectorGrid, cfg: PeakConfig, K: RadialCoefficient, W=None) -> np.ndarray:
    """F_h = Delta_h W + K g(W) at the nodes."""
    if W is None:
        W = evaluate(cfg, K, grid.points, ["W"])["W"]
    return grid.laplacian @ W + _radial_K(K, grid) * signed_power(W, 5 + cfg.mu)


def pde_residual(grid: SectorGrid, K: RadialCoefficient, mu: float, u) -> np.ndarray:
    """G(u) = -Delta_h u - K |u|^(4+mu) u."""
    return -(grid.laplacian @ u) - _radial_K(K, grid) * signed_power(u, 5 + mu)


# ---------------------------------------------------------------------------
# linear solves
# ---------------------------------------------------------------------------


def _amg_preconditioner(grid: SectorGrid):
    """Smoothed-aggregation AMG for V (-Delta_h), built once per grid."""
    if "amg" not in grid.cache:
        import pyamg

        A = (sp.diags(grid.volumes) @ (-grid.laplacian)).tocsr()
        grid.cache["amg"] = pyamg.smoothed_aggregation_solver(A, symmetry="nonsymmetric").aspreconditioner()
    return grid.cache["amg"]


def use_direct(grid: SectorGrid, method: str = "auto") -> bool:
    if method not in ("auto", "direct", "krylov"):
        raise ValueError(f"unknown linear method {method!r}")
    return method == "direct" or (method == "auto" and grid.n <= DIRECT_MAX)


def operator_solver(grid: SectorGrid, A: sp.spmatrix, method: str = "auto"):
    """Return x = solve(b) for A x = b: sparse LU, or GMRES on V A x = V b
    preconditioned by AMG for the volume-weighted Laplacian."""
    if use_direct(grid, method):
        return spla.splu(A.tocsc(), permc_spec="COLAMD").solve
    VA = (sp.diags(grid.volumes) @ A).tocsr()
    M = _amg_preconditioner(grid)

    def solve(b):
        vb = grid.volumes * b
        x, info = spla.gmres(VA, vb, M=M, rtol=KRYLOV_RTOL, atol=0.0, restart=150, maxiter=10)
        rel = np.linalg.norm(VA @ x - vb) / max(np.linalg.norm(vb), 1e-300)
        if info != 0 and rel > 1e-10:
            raise SolverError(f"GMRES stopped at relative residual {rel:.2e}")
        return x

    return solve


@dataclass
class ConstrainedSolveResult:
    c1: float
    c2: float
    phi: SectorField
    residual_norm: float
    iterations: int
    orthogonality: tuple[float, float] = (0.0, 0.0)
    history: list = field(default_factory=list)


def _constraint_directions(grid, cfg, K):
    e = evaluate(cfg, K, grid.points, ["W", "lap_lam", "lap_sig"])
    g = np.stack([e["lap_lam"], e["lap_sig"]], axis=1)
    gnorm = np.sqrt(np.sum(grid.volumes[:, None] * g * g, axis=0))
    if np.any(gnorm == 0) or not np.all(np.isfinite(gnorm)):
        raise SingularBorderedSystem("constraint direction vanishes on the grid")
    return e["W"], g, gnorm


class BorderedSolver:
    """Factorised bordered system for L phi = f + c1 g1 + c2 g2, <phi, g_t>_h = 0.

    ``g1``, ``g2`` are the analytic Delta W_lambda, Delta W_sigma at the nodes,
    normalised internally; multipliers are returned in the original scaling.
    The direct path factorises the full bordered matrix (robust when L is
    nearly singular); the Krylov path eliminates the multipliers through the
    2x2 Schur complement.  Either factorisation is reused for every
    right-hand side.

    Parameters
    ----------
    matrix : sparse matrix, optional
        Operator replacing L (the Jacobian at W + phi in the bordered Newton).
    """

    def __init__(self, grid: SectorGrid, cfg: PeakConfig, K: RadialCoefficient, method: str = "auto",
                 matrix=None, directions=None):
        self.grid, self.cfg, self.K = grid, cfg, K
        self.W, self.g, self.gnorm = directions or _constraint_directions(grid, cfg, K)
        self.gh = self.g / self.gnorm
        self.Lh = linearized_matrix(grid, cfg, K, self.W) if matrix is None else matrix.tocsr()
        row = (self.gh * grid.volumes[:, None]).T
        self.rows = row / np.max(np.abs(row), axis=1)[:, None]
        self.direct = use_direct(grid, method)
        self.A = sp.bmat([[self.Lh, sp.csr_matrix(-self.gh)], [sp.csr_matrix(self.rows), None]], format="csc")
        try:
            if self.direct:
                self.lu = spla.splu(self.A, permc_spec="COLAMD")
                d = np.abs(self.lu.U.diagonal())
                self.pivot_ratio = float(d.min() / d.max())
            else:
                self._solve_L = operator_solver(grid, self.Lh, "krylov")
                self.Z = np.stack([self._solve_L(self.gh[:, 0]), self._solve_L(self.gh[:, 1])], axis=1)
                self.S = self.rows @ self.Z
                sv = np.linalg.svd(self.S, compute_uv=False)
                if sv[-1] == 0:
                    raise RuntimeError("Schur complement is singular")
                self.pivot_ratio = float(sv[-1] / sv[0])
        except RuntimeError as exc:
            raise SingularBorderedSystem(f"bordered system is singular: {exc}") from exc

    def _raw_solve(self, b):
        n = self.grid.n
        if self.direct:
            return self.lu.solve(b)
        z0 = self._solve_L(b[:n])
        # L (z0 + Z c) = b + gh c  and  rows (z0 + Z c) = b_c
        c = np.linalg.solve(self.S, b[n:] - self.rows @ z0)
        return np.concatenate([z0 + self.Z @ c, c])

    def solve(self, f, tol: float = 1e-10, max_refine: int = 4) -> ConstrainedSolveResult:
        f = f.values if isinstance(f, SectorField) else np.asarray(f, dtype=float)
        if f.shape != (self.grid.n,) or not np.all(np.isfinite(f)):
            raise ValueError("right-hand side must be finite with one value per node")
        n = self.grid.n
        b = np.concatenate([f, [0.0, 0.0]])
        bn = np.linalg.norm(b)
        if bn == 0:
            return ConstrainedSolveResult(0.0, 0.0, SectorField(self.grid, np.zeros(n)), 0.0, 0)
        x = self._raw_solve(b)
        res = np.linalg.norm(b - self.A @ x) / bn
        hist = [res]
        it = 1
        while res > 1e-14 and it <= max_refine:
            xn = x + self._raw_solve(b - self.A @ x)
            new = np.linalg.norm(b - self.A @ xn) / bn
            it += 1
            if not new < res:
                break
            x, res = xn, new
            hist.append(res)
        if not np.all(np.isfinite(x)):
            raise SingularBorderedSystem("bordered solve produced non-finite values", hist)
        if res > tol:
            raise SingularBorderedSystem(
                f"relative residual {res:.2e} above {tol:.0e}; smallest/largest pivot {self.pivot_ratio:.2e}", hist)
        phi = x[:n]
        c = x[n:] / self.gnorm
        orth = tuple(abs(self.grid.inner(phi, self.g[:, t])) for t in (0, 1))
        return ConstrainedSolveResult(float(c[0]), float(c[1]), SectorField(self.grid, phi), float(res), it, orth, hist)


def solve_constrained_linear(grid: SectorGrid, cfg: PeakConfig, K: RadialCoefficient, f,
                             method: str = "auto") -> ConstrainedSolveResult:
    """Solve L phi = f + c1 Delta W_lambda + c2 Delta W_sigma with phi orthogonal
    (in <.,.>_h) to both Delta W_t."""
    return BorderedSolver(grid, cfg, K, method).solve(f)


# ---------------------------------------------------------------------------
# projected nonlinear problem
# ---------------------------------------------------------------------------


def projected_nonlinear_solve(grid: SectorGrid, cfg: PeakConfig, K: RadialCoefficient,
                              max_iter: int = 50, tol: float = 1e-10, method: str = "picard",
                              phi0=None, c0=None, linear_method: str = "auto",
                              solver: BorderedSolver | None = None) -> ConstrainedSolveResult:
    """Find phi orthogonal to Delta W_t with L phi = F_h + N(phi) + c1 g1 + c2 g2.

    Parameters
    ----------
    method : {"picard", "newton"}
        "picard" iterates phi_(n+1) = S(F_h + N(phi_n)), S the constrained
        linear solve, until ||phi_(n+1) - phi_n||_h <= tol * max(1, ||phi||_h).
        "newton" applies Newton with backtracking to the bordered nonlinear
        system from (phi0, c0) until the residual has dropped by ``tol``
        relative to ||F_h||_h; it also works outside the contraction regime.

    Raises
    ------
    NonContraction
        Picard step growing for 5 consecutive iterations, blow-up, or no
        convergence in ``max_iter`` iterations.
    """
    if method == "newton":
        return _bordered_newton(grid, cfg, K, phi0, c0, max_iter, tol, linear_method)
    if method != "picard":
        raise ValueError(f"unknown method {method!r}")
    solver = solver or BorderedSolver(grid, cfg, K, linear_method)
    F = discrete_residual(grid, cfg, K, solver.W)
    wn = grid.norm(solver.W)
    phi = np.zeros(grid.n)
    steps = []
    growth = 0
    for it in range(1, max_iter + 1):
        N = nonlinear_N(cfg, K, grid.points, phi, W=solver.W) if it > 1 else np.zeros(grid.n)
        if not np.all(np.isfinite(N)):
            raise NonContraction("nonlinear term overflowed", steps)
        res = solver.solve(F + N)
        new = res.phi.values
        step = grid.norm(new - phi)
        steps.append(step)
        phi = new
        if not math.isfinite(step) or grid.norm(phi) > 1e3 * wn:
            raise NonContraction("projected iteration blew up", steps)
        if step <= tol * max(1.0, grid.norm(phi)):
            res.iterations = it
            res.history = steps
            return res
        if len(steps) > 1 and step > steps[-2]:
            growth += 1
            if growth >= 5:
                raise NonContraction("projected iteration is not contracting", steps)
        else:
            growth = 0
    raise NonContraction(f"no convergence in {max_iter} iterations", steps)


def _project_out(grid, gh, v):
    """v minus its <.,.>_h projection onto span(gh)."""
    G = gh * grid.volumes[:, None]
    return v - gh @ np.linalg.solve(G.T @ gh, G.T @ v)


def _bordered_newton(grid, cfg, K, phi0, c0, max_iter, tol, linear_method):
    dirs = _constraint_directions(grid, cfg, K)
    W, g, gnorm = dirs
    gh = g / gnorm
    Kx = _radial_K(K, grid)
    p = 5 + cfg.mu
    # warm starts come from nearby parameters; restore the constraint exactly,
    # after which the homogeneous bordered rows keep it
    phi = np.zeros(grid.n) if phi0 is None else _project_out(grid, gh, np.array(phi0, dtype=float))
    a = np.zeros(2) if c0 is None else np.asarray(c0, dtype=float) * gnorm

    def resid(ph, aa):
        r = -(grid.laplacian @ (W + ph)) - Kx * signed_power(W + ph, p) - gh @ aa
        return r, grid.norm(r)

    r, rn = resid(phi, a)
    hist = [rn]
    target = tol * max(grid.norm(discrete_residual(grid, cfg, K, W)), 1e-300)
    it = 0
    while hist[-1] > target:
        if it >= max_iter:
            raise NonContraction(f"bordered Newton: no convergence in {max_iter} iterations", hist)
        it += 1
        J = (-grid.laplacian - sp.diags(_potential(grid, K, cfg.mu, W + phi))).tocsr()
        step = BorderedSolver(grid, cfg, K, linear_method, matrix=J, directions=dirs).solve(-r, tol=1e-8)
        dphi = step.phi.values
        da = np.array([step.c1, step.c2]) * gnorm
        t = 1.0
        while True:
            pn, an = phi + t * dphi, a + t * da
            rn_vec, qn = resid(pn, an)
            if math.isfinite(qn) and qn <= (1 - 1e-4 * t) * hist[-1]:
                break
            t *= 0.5
            if t < 1e-6:
                raise NonContraction("bordered Newton line search stagnated", hist)
        phi, a, r = pn, an, rn_vec
        hist.append(qn)
    c = a / gnorm
    orth = tuple(abs(grid.inner(phi, g[:, t])) for t in (0, 1))
    return ConstrainedSolveResult(float(c[0]), float(c[1]), SectorField(grid, phi),
                                  hist[-1] / max(hist[0], 1e-300), it, orth, hist)


# ---------------------------------------------------------------------------
# parameter matching
# ---------------------------------------------------------------------------


class ReducedMap:
    """(lambda, sigma) -> scaled multipliers, with warm starts along a path.

    Multipliers are reported as c_t ||Delta W_t||_h / ||F_h||_h, the size of
    the force the constraint absorbs relative to the ansatz residual.  Moves
    between parameter points are split into substeps that shift the peak
    radius by at most half a grid cell and lambda by at most 10%, each
    started from the previous (phi, c), so the map follows one branch of the
    projected problem.
    """

    def __init__(self, grid: SectorGrid, K: RadialCoefficient, mu: float,
                 method: str = "auto", linear_method: str = "auto"):
        if method not in ("auto", "picard", "newton"):
            raise ValueError(f"unknown method {method!r}")
        self.grid, self.K, self.mu = grid, K, mu
        self.method, self.linear_method = method, linear_method
        self.state = None  # (x, phi, c) of the last kept point
        self.evaluations = 0

    def config(self, x) -> PeakConfig:
        return PeakConfig(self.mu, float(x[0]), float(x[1]), self.grid.k)

    def _solve_at(self, x, phi0, c0):
        cfg = self.config(x)
        self.evaluations += 1
        if self.method == "picard" or (self.method == "auto" and phi0 is None):
            try:
                return cfg, projected_nonlinear_solve(self.grid, cfg, self.K, max_iter=30, tol=1e-11,
                                                      linear_method=self.linear_method)
            except SolverError:
                if self.method == "picard":
                    raise
        return cfg, projected_nonlinear_solve(self.grid, cfg, self.K, max_iter=25, tol=1e-11, method="newton",
                                              phi0=phi0, c0=c0, linear_method=self.linear_method)

    def __call__(self, x, keep: bool = True):
        x = np.asarray(x, dtype=float)
        if self.state is None:
            path, phi, c = [x], None, None
        else:
            x0, phi, c = self.state
            h = 0.5 / self.grid.n_s
            nsub = max(1, math.ceil(max(abs(x[0] - x0[0]) / (0.1 * x0[0]),
                                        abs(x[1] - x0[1]) * math.sqrt(self.mu) / h)))
            path = [x0 + (x - x0) * j / nsub for j in range(1, nsub + 1)]
        for xx in path:
            cfg, res = self._solve_at(xx, phi, c)
            phi, c = res.phi.values, np.array([res.c1, res.c2])
        if keep:
            self.state = (x, phi, c)
        W, g, gnorm = _constraint_directions(self.grid, cfg, self.K)
        Fn = self.grid.norm(discrete_residual(self.grid, cfg, self.K, W))
        scaled = np.array([res.c1, res.c2]) * gnorm / max(Fn, 1e-300)
        return scaled, res, cfg


@dataclass
class MatchResult:
    lambda_hat: float
    sigma_hat: float
    c_history: list
    projected: ConstrainedSolveResult
    cfg: PeakConfig
    evaluations: int = 0
    c_norm: float = 0.0
    approximate: bool = False


def default_box(mu: float, kprime1: float = 1.0):
    """Q = [lam* -+ mu^(1/6)] x [sigma* -+ mu^(1/6)], clipped to lam > 0 and r > 0."""
    consts = solve_reduced_system(kprime1)
    d = mu ** (1 / 6)
    sig_hi = min(consts.sigma_star + d, (1 - 1e-3) / math.sqrt(mu))
    return ((max(consts.lambda_star - d, 1e-3), consts.lambda_star + d),
            (max(consts.sigma_star - d, 1e-3), sig_hi))


def match_parameters(grid: SectorGrid, K: RadialCoefficient, mu: float, search_box=None, start=None,
                     tol: float = 1e-8, max_iter: int = 30, theorem_mode: bool = True,
                     method: str = "auto", linear_method: str = "auto",
                     accept_tol: float | None = None) -> MatchResult:
    """Find (lambda, sigma) in the box where both multipliers vanish.

    Damped Newton on (lambda, sigma) -> (c1, c2) with a forward-difference
    Jacobian, step max(1e-4, mu^(2/3)) * 0.1 |x_t| in each parameter.  The
    multipliers are scaled as in :class:`ReducedMap`, so ``tol`` is relative
    to the ansatz residual.

    Parameters
    ----------
    search_box : ((lam_lo, lam_hi), (sig_lo, sig_hi)), optional
        Defaults to Q around (lambda*, sigma*).
    start : (lam, sigma), optional
        Defaults to the box centre.
    theorem_mode : bool
        Require k = floor(mu^-1/2) on the grid.
    accept_tol : float, optional
        Stop as soon as the scaled |c| is at most ``accept_tol``, and accept
        a stalled iteration that got there (on coarse grids the map carries
        a grid-pinning ripple).  Such results are flagged ``approximate``;
        the full Newton solve then removes the remaining multipliers.

    Raises
    ------
    MatchingFailure
        With the (c1, c2) field on a 3x3 sub-grid of the box.
    """
    k = grid.k
    if theorem_mode and k != theorem_k(mu):
        raise ValueError(f"grid has k = {k}, theorem mode needs k = {theorem_k(mu)}")
    box = search_box or default_box(mu, K.kprime1)
    (l0, l1), (s0, s1) = box
    lo, hi = np.array([l0, s0]), np.array([l1, s1])
    x = np.array(start if start is not None else [(l0 + l1) / 2, (s0 + s1) / 2], dtype=float)
    rmap = ReducedMap(grid, K, mu, method=method, linear_method=linear_method)
    fd = max(1e-4, mu ** (2 / 3)) * 0.1

    hist = []
    try:
        c, res, cfg = rmap(x)
        hist.append((float(x[0]), float(x[1]), float(c[0]), float(c[1])))
        for _ in range(max_iter):
            if np.linalg.norm(c) <= (tol if accept_tol is None else max(tol, accept_tol)):
                break
            Jm = np.empty((2, 2))
            for a in range(2):
                xp = x.copy()
                step = fd * abs(x[a])
                xp[a] += step
                Jm[:, a] = (rmap(xp, keep=False)[0] - c) / step
            dx = -np.linalg.solve(Jm, c)
            t = 1.0
            while True:
                xn = np.clip(x + t * dx, lo, hi)
                cn = rmap(xn, keep=False)[0]
                if np.linalg.norm(cn) < np.linalg.norm(c) or t < 1e-2:
                    break
                t *= 0.5
            if not np.linalg.norm(cn) < np.linalg.norm(c):
                break
            x = xn
            c, res, cfg = rmap(x)
            hist.append((float(x[0]), float(x[1]), float(c[0]), float(c[1])))
    except (SolverError, np.linalg.LinAlgError, ValueError) as exc:
        raise MatchingFailure(f"matching failed: {exc}", _coarse_field(grid, K, mu, box, method, linear_method),
                              hist) from exc
    cn_final = float(np.linalg.norm(c))
    if cn_final <= tol or (accept_tol is not None and cn_final <= accept_tol):
        return MatchResult(float(x[0]), float(x[1]), hist, res, cfg, rmap.evaluations, cn_final, cn_final > tol)
    raise MatchingFailure(f"no zero of (c1, c2) found in box; last |c| = {np.linalg.norm(c):.3e}",
                          _coarse_field(grid, K, mu, box, method, linear_method), hist)


def _coarse_field(grid, K, mu, box, method, linear_method, n=3):
    out = []
    for lam in np.linspace(*box[0], n):
        for sig in np.linspace(*box[1], n):
            try:
                c = ReducedMap(grid, K, mu, method=method, linear_method=linear_method)((lam, sig))[0]
                out.append((float(lam), float(sig), float(c[0]), float(c[1])))
            except (SolverError, ValueError, np.linalg.LinAlgError):
                out.append((float(lam), float(sig), math.nan, math.nan))
    return out


# ---------------------------------------------------------------------------
# full Newton solve
# ---------------------------------------------------------------------------


@dataclass
class NewtonReport:
    converged: bool
    iterations: int
    residual_history: list
    min_value: float
    peak_list: list
    predicted_height: float
    predicted_radius: float
    exploratory: bool = False
    warnings: list = field(default_factory=list)

    @property
    def residual_drop(self) -> float:
        h = self.residual_history
        return h[0] / h[-1] if h and h[-1] > 0 else math.inf

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_history": [float(v) for v in self.residual_history],
            "residual_drop": float(self.residual_drop),
            "min_value": self.min_value,
            "peak_list": [{"location": [float(c) for c in p], "height": h} for p, h in self.peak_list],
            "predicted_height": self.predicted_height,
            "predicted_radius": self.predicted_radius,
            "exploratory": self.exploratory,
            "warnings": list(self.warnings),
        }


def newton_full(grid: SectorGrid, K: RadialCoefficient, mu: float, init="ansatz", cfg: PeakConfig | None = None,
                max_iter: int = 40, tol: float = 1e-9, rel_tol: float = 1e-10,
                exploratory: bool | None = None, linear_method: str = "auto",
                match: MatchResult | None = None) -> tuple[SectorField, NewtonReport]:
    """Newton with backtracking on G(u) = -Delta_h u - K |u|^(4+mu) u.

    Parameters
    ----------
    init : "ansatz", "reduced", SectorField or array
        Starting iterate.  "ansatz" samples W at ``cfg``; "reduced" starts
        from W + phi of the projected problem at the matched parameters.
        Without ``cfg`` and ``match`` the parameters come from
        :func:`match_parameters` over the default box.
    tol, rel_tol : float
        Converged when ||G||_h <= max(tol, rel_tol * h0), h0 the first entry
        of the residual history.

    Returns
    -------
    (SectorField, NewtonReport)
        For the string inits the residual history starts at ||G(W)||_h, so
        the reported drop is measured from the ansatz.  ``converged`` also
        requires u > 0.

    Raises
    ------
    NewtonDivergence
        On line-search stagnation or non-finite iterates; the residual history
        is attached.
    """
    if isinstance(init, str):
        if init not in ("ansatz", "reduced"):
            raise ValueError(f"unknown init {init!r}")
        if match is None and (cfg is None or init == "reduced"):
            match = match_parameters(grid, K, mu, theorem_mode=cfg.theorem_mode if cfg else True,
                                     linear_method=linear_method)
        if match is not None:
            cfg = match.cfg
        W = evaluate(cfg, K, grid.points, ["W"])["W"]
        u = W + match.projected.phi.values if init == "reduced" else W.copy()
        hist = [grid.norm(pde_residual(grid, K, mu, W))]
    else:
        u = np.array(init.values if isinstance(init, SectorField) else init, dtype=float)
        if u.shape != (grid.n,):
            raise ValueError("initial iterate has the wrong size")
        hist = []
    if exploratory is None:
        exploratory = mu > 0.05 or (cfg is not None and not cfg.theorem_mode)
    G = pde_residual(grid, K, mu, u)
    gn = grid.norm(G)
    if not hist or gn != hist[0]:
        hist.append(gn)
    target = max(tol, rel_tol * hist[0])
    it = 0
    while hist[-1] > target and it < max_iter:
        it += 1
        J = (-grid.laplacian - sp.diags(_potential(grid, K, mu, u))).tocsr()
        try:
            du = operator_solver(grid, J, linear_method)(-G)
        except (RuntimeError, SolverError) as exc:
            raise NewtonDivergence(f"linear solve failed: {exc}", hist) from exc
        if not np.all(np.isfinite(du)):
            raise NewtonDivergence("non-finite Newton step", hist)
        t = 1.0
        while True:
            un = u + t * du
            Gn = pde_residual(grid, K, mu, un)
            rn = grid.norm(Gn)
            if np.isfinite(rn) and rn <= (1 - 1e-4 * t) * hist[-1]:
                break
            t *= 0.5
            if t < 1e-6:
                raise NewtonDivergence("line search stagnated", hist)
        u, G = un, Gn
        hist.append(rn)
    conv = hist[-1] <= target
    field_u = SectorField(grid, u)
    pred_h = cfg.peak_height(K) if cfg is not None else math.nan
    pred_r = cfg.r if cfg is not None else math.nan
    min_v = float(u.min())
    report = NewtonReport(conv and min_v > 0, it, hist, min_v, peak_census(field_u), pred_h, pred_r, exploratory)
    if conv and min_v <= 0:
        report.warnings.append("residual converged but the iterate is not positive")
    if not conv:
        report.warnings.append(f"no convergence in {max_iter} iterations")
    if report.peak_list and math.isfinite(pred_h):
        top = max(h for _, h in report.peak_list)
        if abs(top - pred_h) > 0.25 * pred_h:
            msg = f"peak height {top:.4g} differs from prediction {pred_h:.4g} by more than 25%"
            report.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
    return field_u, report


# ---------------------------------------------------------------------------
# peak census and output
# ---------------------------------------------------------------------------


def _neighbours(grid: SectorGrid):
    if "neighbours" in grid.cache:
        return grid.cache["neighbours"]
    idx = grid.index
    ns, nt, ny = grid.n_s, grid.n_theta, grid.n_y
    out = []
    for node, (i, j, l) in enumerate(grid.ijl):
        nb = set()
        if i == 0:
            cand = [(1, jj, l + dl) for jj in range(nt + 1) for dl in (-1, 0, 1)]
            cand += [(0, 0, l + dl) for dl in (-1, 1)]
        else:
            cand = [(i + di, j + dj, l + dl) for di in (-1, 0, 1) for dj in (-1, 0, 1) for dl in (-1, 0, 1)
                    if (di, dj, dl) != (0, 0, 0)]
        for a, b, c in cand:
            b = -b if b < 0 else (2 * nt - b if b > nt else b)
            c = -c if c < 0 else c
            if a > ns or c > ny:
                nb.add(-1)
                continue
            m = idx[a, b, c]
            if m != node:
                nb.add(int(m))
        out.append(np.array(sorted(nb), dtype=np.int64))
    grid.cache["neighbours"] = out
    return out


def peak_census(u: SectorField, unfold_peaks: bool = True) -> list:
    """Strict local maxima of nodal values, unfolded to the whole ball.

    A node is a strict maximum when its value exceeds every neighbour in the
    3x3x3 index neighbourhood (mirror ghosts included, value 0 outside the
    ball).  Returns a list of (location, height) pairs.
    """
    grid, v = u.grid, u.values
    if not np.all(np.isfinite(v)):
        raise ValueError("field is not finite")
    vext = np.append(v, 0.0)  # index -1 reads the boundary value
    peaks = []
    for node, nb in enumerate(_neighbours(grid)):
        if len(nb) and v[node] > vext[nb].max():
            peaks.append((grid.points[node], float(v[node])))
    if not unfold_peaks:
        return peaks
    out = []
    for p, h in peaks:
        for q in unfold(p, grid.k):
            out.append((q, h))
    return out


def write_node_dump(u: SectorField, path) -> None:
    """CSV node dump: node index, cylindrical and Cartesian coordinates, value."""
    g = u.grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "s", "theta", "y", "x1", "x2", "x3", "value"])
        for i in range(g.n):
            w.writerow([i, repr(float(g.s[i])), repr(float(g.theta[i])), repr(float(g.y[i])),
                        *(repr(float(c)) for c in g.points[i]), repr(float(u.values[i]))])

"""Command-line interface: ``peakball {constants,scan,sweep,solve}``.

Exit codes: 0 success, 1 invalid configuration, 2 solver non-convergence,
3 numeric failure, 4 a scaling check ran cleanly but did not pass.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
import warnings

import numpy as np

from .bubble import PeakConfig, RadialCoefficient, evaluate, interaction_E, residual_F, theorem_k, weight
from .config import COMMANDS, SCAN_FIELDS, ConfigError, RunConfig, load_config, parse_grid
from .lattice import L_value, solve_reduced_system
from .quadrature import QuadratureSpec

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_NUMERIC, EXIT_CHECK_FAILED = 0, 1, 2, 3, 4
SCHEMA_VERSION = 1

# exploratory defaults for mu > 0.05, where the box Q around (lambda*, sigma*)
# puts the peaks at the centre of the ball: lambda range and peak radius range
EXPLORATORY_LAMBDA = (0.5, 3.0)
EXPLORATORY_RADIUS = (0.25, 0.55)
EXPLORATORY_START = (1.1, 0.385)
# scaled multiplier size accepted from an exploratory match; the full Newton
# solve removes the rest
EXPLORATORY_ACCEPT = 0.05


class _Timer:
    def __init__(self):
        self.marks = {}

    def run(self, name, fn, *a, **kw):
        t = time.perf_counter()
        try:
            return fn(*a, **kw)
        finally:
            self.marks[name] = round(1000 * (time.perf_counter() - t), 3)


def _g12(v):
    return float(f"{v:.12g}")


def _coefficient(cfg: RunConfig) -> RadialCoefficient:
    if cfg.k_table is None:
        return RadialCoefficient.henon(cfg.alpha)
    try:
        data = np.loadtxt(cfg.k_table, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"k_table: {exc}") from None
    if data.shape[1] != 2:
        raise ConfigError("k_table needs two columns: t, K(t)")
    return RadialCoefficient.table(data[:, 0], data[:, 1])


def _params(cfg: RunConfig, K):
    consts = solve_reduced_system(K.kprime1)
    lam = consts.lambda_star if cfg.lam == "star" else cfg.lam
    sigma = consts.sigma_star if cfg.sigma == "star" else cfg.sigma
    return consts, lam, sigma


def _report(cfg: RunConfig, results: dict, timer: _Timer) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": cfg.command,
        "config_echo": cfg.echo(),
        "results": results,
        "timings_ms": {k: 0.0 for k in timer.marks} if cfg.deterministic else timer.marks,
    }


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, allow_nan=True)
        fh.write("\n")


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _fmt(v):
    return repr(float(v))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_constants(cfg: RunConfig, timer: _Timer) -> tuple[int, dict]:
    K = _coefficient(cfg)
    c = timer.run("solve", solve_reduced_system, K.kprime1)
    res = {
        "A1": _g12(c.A1), "A2": _g12(c.A2), "a1": _g12(c.a1), "a2": _g12(c.a2),
        "sigma_star": _g12(c.sigma_star), "lambda_star": _g12(c.lambda_star),
        "L_prime_at_star": _g12(c.L_prime_star), "kprime1": _g12(c.kprime1),
    }
    for v in res.values():
        if not math.isfinite(v):
            raise ArithmeticError("non-finite constant")
    return EXIT_OK, res


def scan_points(cfg: PeakConfig, n: int, seed: int) -> np.ndarray:
    """Points of the sector Omega_0 = {|arg(x1 + i x2)| <= pi/k} of peak 0:
    scrambled Sobol points in the ball, points on the sphere, and the peak."""
    from scipy.stats import qmc

    m = max(1, n)
    u = qmc.Sobol(3, scramble=True, seed=seed).random(2 ** math.ceil(math.log2(m)))[:m]
    rad = u[:, 0] ** (1 / 3) * (1 - 1e-9)
    cz = 2 * u[:, 1] - 1
    ph = (2 * u[:, 2] - 1) * math.pi / cfg.k
    sz = np.sqrt(1 - cz * cz)
    inner = np.stack([rad * sz * np.cos(ph), rad * sz * np.sin(ph), rad * cz], axis=1)
    nb = max(8, n // 10)
    a = np.linspace(-math.pi / cfg.k, math.pi / cfg.k, nb)
    b = np.linspace(-0.9, 0.9, 5)
    A, B = np.meshgrid(a, b)
    S = np.sqrt(1 - B * B)
    sphere = np.stack([(S * np.cos(A)).ravel(), (S * np.sin(A)).ravel(), B.ravel()], axis=1)
    return np.concatenate([[[cfg.r, 0.0, 0.0]], inner, sphere])


def cmd_scan(cfg: RunConfig, timer: _Timer) -> tuple[int, dict]:
    K = _coefficient(cfg)
    consts, lam, sigma = _params(cfg, K)
    k = cfg.k or theorem_k(cfg.mu)
    pc = PeakConfig(cfg.mu, lam, sigma, k)
    pts = scan_points(pc, cfg.scan_points, cfg.seed)
    d0 = np.linalg.norm(pts - np.array([pc.r, 0.0, 0.0]), axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if cfg.scan_field == "residual":
            value = timer.run("evaluate", residual_F, pc, K, pts)
            wb = weight(pc, cfg.rho + 2, pts)
            ratio = np.abs(value) / wb
        elif cfg.scan_field == "ansatz":
            value = timer.run("evaluate", lambda: evaluate(pc, K, pts, ["W"])["W"])
            # sum of the bubbles without images: P * sum_i 1/d_i
            wb = pc.peak_height(K) * weight(pc, 1.0, pts)
            ratio = np.abs(value) / wb
        else:
            value = timer.run("evaluate", interaction_E, pc, pts, "lattice")
            wb = np.full(len(pts), math.sqrt(cfg.mu))
            ratio = np.abs(value - 0.5 * L_value(sigma)) / wb
    if not (np.all(np.isfinite(value)) and np.all(np.isfinite(ratio))):
        raise ArithmeticError("scan produced non-finite values")
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"scan_{cfg.scan_field}.csv")
    with open(path, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["x1", "x2", "x3", "d0", "value", "weight_bound", "ratio"])
        for p, d, v, b, r in zip(pts, d0, value, wb, ratio):
            w.writerow([_fmt(p[0]), _fmt(p[1]), _fmt(p[2]), _fmt(d), _fmt(v), _fmt(b), _fmt(r)])
    return EXIT_OK, {"csv": path, "rows": int(len(pts)), "field": cfg.scan_field, "lambda": lam,
                     "sigma": sigma, "k": k, "max_ratio": float(np.max(ratio))}


def cmd_sweep(cfg: RunConfig, timer: _Timer) -> tuple[int, dict]:
    from .residual import QUANTITIES, scaling_study

    if cfg.quantity not in QUANTITIES:
        raise ConfigError(f"quantity must be one of {QUANTITIES}")
    K = _coefficient(cfg)
    consts, lam, sigma = _params(cfg, K)
    spec = QuadratureSpec(n_radial=cfg.n_radial, n_panels=cfg.n_panels, n_angular=cfg.n_angular,
                          refinement_levels=0)
    rep = timer.run("sweep", scaling_study, cfg.quantity, cfg.mu_list, sigma, lam, K, cfg.rho, spec)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"sweep_{cfg.quantity}.csv")
    with open(path, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["mu", "lambda", "sigma", "value", "bound", "ratio"])
        for r in rep.rows:
            w.writerow([_fmt(r.mu), _fmt(r.lam), _fmt(r.sigma), _fmt(r.value), _fmt(r.bound), _fmt(r.ratio)])
    res = rep.to_dict()
    res["csv"] = path
    if not all(r.ok for r in rep.rows):
        return EXIT_NONCONVERGED, res
    return (EXIT_OK if rep.passed else EXIT_CHECK_FAILED), res


def cmd_solve(cfg: RunConfig, timer: _Timer) -> tuple[int, dict]:
    from .grid import build_sector_grid
    from .solver import MatchingFailure, SolverError, match_parameters, newton_full, write_node_dump

    K = _coefficient(cfg)
    consts = solve_reduced_system(K.kprime1)
    k = cfg.k or theorem_k(cfg.mu)
    exploratory = cfg.exploratory or cfg.mu > 0.05 or k != theorem_k(cfg.mu)
    sq = math.sqrt(cfg.mu)
    if exploratory:
        box = (EXPLORATORY_LAMBDA, ((1 - EXPLORATORY_RADIUS[1]) / sq, (1 - EXPLORATORY_RADIUS[0]) / sq))
        start = [EXPLORATORY_START[0], (1 - EXPLORATORY_START[1]) / sq]
    else:
        box, start = None, None
    if cfg.lam != "star" and start is not None:
        start[0] = cfg.lam
    if cfg.sigma != "star" and start is not None:
        start[1] = cfg.sigma
    grid = timer.run("grid", build_sector_grid, k, *cfg.grid)
    os.makedirs(cfg.out, exist_ok=True)
    report_path = os.path.join(cfg.out, "solve_report.json")
    res = {"exploratory": exploratory, "k": k, "grid": list(cfg.grid), "report": report_path}
    try:
        m = timer.run("match", match_parameters, grid, K, cfg.mu, search_box=box, start=start,
                      theorem_mode=not exploratory, accept_tol=EXPLORATORY_ACCEPT if exploratory else None)
    except MatchingFailure as exc:
        res.update(error=str(exc), c_history=exc.history, c_field=exc.field_samples)
        return EXIT_NONCONVERGED, res
    res.update(lambda_hat=m.lambda_hat, sigma_hat=m.sigma_hat, c_norm=m.c_norm, approximate_match=m.approximate,
               offset_from_star=[m.lambda_hat - consts.lambda_star, m.sigma_hat - consts.sigma_star],
               c_history=[list(h) for h in m.c_history])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            u, rep = timer.run("newton", newton_full, grid, K, cfg.mu, init="reduced", match=m,
                               max_iter=cfg.max_iter, tol=cfg.tol, exploratory=exploratory)
    except SolverError as exc:
        res.update(error=str(exc), residual_history=[float(v) for v in exc.history])
        return EXIT_NONCONVERGED, res
    res["newton"] = rep.to_dict()
    dump = os.path.join(cfg.out, "solution_nodes.csv")
    write_node_dump(u, dump)
    census = os.path.join(cfg.out, "peak_census.csv")
    with open(census, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["peak_index", "x1", "x2", "x3", "height", "predicted_height"])
        for i, (p, h) in enumerate(rep.peak_list):
            w.writerow([i, _fmt(p[0]), _fmt(p[1]), _fmt(p[2]), _fmt(h), _fmt(rep.predicted_height)])
    res.update(node_dump=dump, peak_census=census)
    return (EXIT_OK if rep.converged else EXIT_NONCONVERGED), res


HANDLERS = {"constants": cmd_constants, "scan": cmd_scan, "sweep": cmd_sweep, "solve": cmd_solve}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="peakball", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--mu", type=float)
        p.add_argument("--alpha", type=float, help="Henon exponent, K(t) = t^alpha")
        p.add_argument("--k", type=int, help="number of peaks (default floor(mu^-1/2))")
        p.add_argument("--grid", help="sector grid NsxNtxNy")
        p.add_argument("--out", help="output directory")
        p.add_argument("--deterministic", action="store_true", help="zero timings for byte-identical output")
        if name == "scan":
            p.add_argument("field", nargs="?", choices=SCAN_FIELDS)
        if name == "sweep":
            p.add_argument("quantity", nargs="?")
    return ap


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg.command = args.command
    if args.mu is not None:
        cfg.mu = args.mu
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.k is not None:
        cfg.k = args.k
    if args.grid is not None:
        cfg.grid = parse_grid(args.grid)
    if args.out is not None:
        cfg.out = args.out
    if args.deterministic:
        cfg.deterministic = True
    if getattr(args, "field", None):
        cfg.scan_field = args.field
    if getattr(args, "quantity", None):
        cfg.quantity = args.quantity
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    timer = _Timer()
    try:
        cfg = _resolve(args)
        code, results = HANDLERS[cfg.command](cfg, timer)
    except ConfigError as exc:
        print(f"peakball: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"peakball: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"peakball: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = _report(cfg, results, timer)
    if cfg.command == "constants":
        print(json.dumps(report, indent=2))
    else:
        os.makedirs(cfg.out, exist_ok=True)
        _write_json(os.path.join(cfg.out, f"{cfg.command}_report.json" if cfg.command != "solve"
                                 else "solve_report.json"), report)
        print(json.dumps({"command": cfg.command, "exit_code": code, "out": cfg.out}))
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Plain-text run configuration: ``key = value`` lines with ``#`` comments."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields

COMMANDS = ("constants", "scan", "sweep", "solve")
SCAN_FIELDS = ("residual", "ansatz", "E")
MU_MAX = 0.12


class ConfigError(ValueError):
    pass


def _parse_float(key, text):
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: value must be finite")
    return v


def _parse_int(key, text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}") from None


def _parse_bool(key, text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _parse_star_or_float(key, text):
    return "star" if text.strip().lower() == "star" else _parse_float(key, text)


def _parse_mu_list(key, text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise ConfigError(f"{key}: empty list")
    return tuple(_parse_float(key, p) for p in parts)


def parse_grid(text: str) -> tuple[int, int, int]:
    """'64x16x64' -> (64, 16, 64)."""
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"grid: expected NsxNtxNy, got {text!r}")
    return tuple(_parse_int("grid", p) for p in parts)


@dataclass
class RunConfig:
    """Settings for one CLI command; defaults give a valid theorem-mode run."""

    command: str = "constants"
    alpha: float = 1.0
    k_table: str | None = None
    mu: float = 1e-3
    mu_list: tuple = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4)
    lam: object = "star"
    sigma: object = "star"
    k: int | None = None
    grid: tuple = (48, 12, 48)
    n_radial: int = 12
    n_panels: int = 8
    n_angular: int = 48
    rho: float = 0.5
    scan_field: str = "residual"
    scan_points: int = 2000
    quantity: str = "E_limit"
    max_iter: int = 40
    tol: float = 1e-9
    out: str = "out"
    seed: int = 0
    deterministic: bool = False
    exploratory: bool = False
    source: str | None = field(default=None, repr=False)

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"command must be one of {COMMANDS}")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.k_table is not None and not os.path.isfile(self.k_table):
            raise ConfigError(f"k_table file not found: {self.k_table}")
        for m in (self.mu, *self.mu_list):
            if not 0 < m <= MU_MAX:
                raise ConfigError(f"mu values must lie in (0, {MU_MAX}], got {m}")
        for name in ("lam", "sigma"):
            v = getattr(self, name)
            if v != "star" and not (isinstance(v, float) and v > 0):
                raise ConfigError(f"{name} must be positive or 'star'")
        if self.k is not None and self.k < 2:
            raise ConfigError("k must be >= 2")
        if len(self.grid) != 3 or min(self.grid) < 8:
            raise ConfigError("grid resolutions must be >= 8")
        if min(self.n_radial, self.n_panels, self.n_angular) < 4:
            raise ConfigError("quadrature resolutions must be >= 4")
        if not self.rho >= 0:
            raise ConfigError("rho must be >= 0")
        if self.scan_field not in SCAN_FIELDS:
            raise ConfigError(f"scan_field must be one of {SCAN_FIELDS}")
        if self.scan_points < 1:
            raise ConfigError("scan_points must be >= 1")
        if self.max_iter < 1 or not self.tol > 0:
            raise ConfigError("max_iter >= 1 and tol > 0 required")
        return self

    def echo(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "source":
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_PARSERS = {
    "command": lambda k, v: v.strip(),
    "alpha": _parse_float,
    "k_table": lambda k, v: v.strip(),
    "mu": _parse_float,
    "mu_list": _parse_mu_list,
    "lambda": _parse_star_or_float,
    "sigma": _parse_star_or_float,
    "k": _parse_int,
    "grid": lambda k, v: parse_grid(v.strip()),
    "n_radial": _parse_int,
    "n_panels": _parse_int,
    "n_angular": _parse_int,
    "rho": _parse_float,
    "scan_field": lambda k, v: v.strip(),
    "scan_points": _parse_int,
    "quantity": lambda k, v: v.strip(),
    "max_iter": _parse_int,
    "tol": _parse_float,
    "out": lambda k, v: v.strip(),
    "seed": _parse_int,
    "deterministic": _parse_bool,
    "exploratory": _parse_bool,
}
_ATTR = {"lambda": "lam"}


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        setattr(cfg, _ATTR.get(key, key), _PARSERS[key](key, value))
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config_text(text)
    cfg.source = str(path)
    return cfg

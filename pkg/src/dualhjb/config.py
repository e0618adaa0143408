"""JSON scenario files: parsing, validation and defaults."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .dual import QuadratureConfig
from .errors import ConfigError
from .market import MarketParams, market_from_dict
from .simulation import SimConfig
from .utility import UtilityFunction, utility_from_dict

__all__ = ["ScenarioConfig", "parse_config", "load_config", "grid_from_spec", "MERTON_SCENARIO", "KINKED_SCENARIO"]

_TOP_KEYS = {"seed", "market", "utility", "quadrature", "simulation", "grids", "x0", "application", "output"}

MERTON_SCENARIO = {
    "market": {"n": 1, "T": 1.0, "b": [[0.2]], "sigma": [[0.4]], "cone": {"kind": "whole"}},
    "utility": {"family": "power", "p": 0.5},
}

KINKED_SCENARIO = {
    "market": {"n": 1, "T": 1.0, "b": [[0.2]], "sigma": [[0.4]], "cone": {"kind": "whole"}},
    "utility": {
        "family": "piecewise",
        "branches": [{"kind": "linear", "coef": 1.0}, {"kind": "power", "coef": 1.0, "exponent": 0.5}],
        "crossovers": [1.0],
    },
    "x0": 2.0,
}


def grid_from_spec(spec, path: str) -> np.ndarray:
    """A list of numbers, or ``{"start", "stop", "num", "scale": "lin" | "log"}``."""
    if isinstance(spec, list):
        try:
            g = np.array([float(v) for v in spec])
        except (TypeError, ValueError):
            raise ConfigError("grid entries must be numbers", path) from None
        if g.size == 0:
            raise ConfigError("grid must not be empty", path)
        return g
    if isinstance(spec, dict):
        extra = set(spec) - {"start", "stop", "num", "scale"}
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", path)
        try:
            a, b, n = float(spec["start"]), float(spec["stop"]), int(spec["num"])
        except KeyError as e:
            raise ConfigError(f"missing field {e.args[0]!r}", path) from None
        except (TypeError, ValueError):
            raise ConfigError("start/stop must be numbers and num an integer", path) from None
        if n < 1:
            raise ConfigError("num must be >= 1", f"{path}.num")
        scale = spec.get("scale", "lin")
        if scale == "lin":
            return np.linspace(a, b, n)
        if scale == "log":
            if a <= 0 or b <= 0:
                raise ConfigError("log grids need positive start and stop", path)
            return np.geomspace(a, b, n)
        raise ConfigError(f"scale must be 'lin' or 'log', got {scale!r}", f"{path}.scale")
    raise ConfigError("expected a list or a range object", path)


def _section(d: dict, key: str, allowed: set) -> dict:
    sec = d.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigError("expected an object", key)
    extra = set(sec) - allowed
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", key)
    return sec


def _typed(sec: dict, key: str, typ, default, path: str):
    v = sec.get(key, default)
    if typ is bool:
        if not isinstance(v, bool):
            raise ConfigError("expected true or false", f"{path}.{key}")
        return v
    if typ is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise ConfigError("expected an integer", f"{path}.{key}")
    if typ is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
        raise ConfigError("expected a number", f"{path}.{key}")
    if typ is str and not isinstance(v, str):
        raise ConfigError("expected a string", f"{path}.{key}")
    return typ(v)


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    raw: dict  # fully resolved document, defaults included
    market: MarketParams
    utility: UtilityFunction
    quad: QuadratureConfig
    sim: SimConfig
    x0: float
    t_grid: np.ndarray
    x_grid: np.ndarray
    y_grid: np.ndarray
    cvar_beta: float
    cvar_lambdas: tuple[float, ...]
    risk_t: np.ndarray
    risk_x: np.ndarray
    per_path: bool = False
    out_dir: str = "out"
    extras: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.sim.seed

    def canonical(self) -> str:
        """Scenario identity; worker count and output location do not change results."""
        doc = json.loads(json.dumps(self.raw))
        doc["simulation"].pop("workers", None)
        doc["output"].pop("dir", None)
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, workers: int | None = None, out_dir: str | None = None):
        raw = json.loads(json.dumps(self.raw))
        if seed is not None:
            raw["seed"] = seed
        if workers is not None:
            raw["simulation"]["workers"] = workers
        if out_dir is not None:
            raw["output"]["dir"] = out_dir
        return build_config(raw)


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate a JSON scenario.

    Syntax errors report line and column; semantic errors name the field.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return build_config(doc)


def load_config(path: str) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def build_config(doc) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")
    extra = set(doc) - _TOP_KEYS
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    for key in ("market", "utility"):
        if key not in doc:
            raise ConfigError("missing section", key)
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
    market = market_from_dict(doc["market"])
    utility = utility_from_dict(doc["utility"])

    q = _section(doc, "quadrature", {"half_width", "nodes", "scheme"})
    quad = QuadratureConfig(
        _typed(q, "half_width", float, 8.0, "quadrature"),
        _typed(q, "nodes", int, 4001, "quadrature"),
        _typed(q, "scheme", str, "kernel", "quadrature"),
    )
    s = _section(doc, "simulation", {"paths", "steps_per_year", "antithetic", "workers", "block_size", "scheme"})
    sim = SimConfig(
        paths=_typed(s, "paths", int, 100_000, "simulation"),
        steps_per_year=_typed(s, "steps_per_year", int, 250, "simulation"),
        seed=seed,
        scheme=_typed(s, "scheme", str, "log-euler", "simulation"),
        antithetic=_typed(s, "antithetic", bool, True, "simulation"),
        workers=_typed(s, "workers", int, 1, "simulation"),
        block_size=_typed(s, "block_size", int, 8192, "simulation"),
    )
    x0 = _typed(doc, "x0", float, 1.0, "x0") if "x0" in doc else 1.0
    if not x0 > 0:
        raise ConfigError("x0 must be positive", "x0")

    T = market.T
    g = _section(doc, "grids", {"t", "x", "y"})
    g_t = g.get("t", {"start": 0.0, "stop": round(T - 0.01 * T, 12), "num": 11})
    g_x = g.get("x", {"start": 0.01, "stop": 100.0, "num": 21, "scale": "log"})
    g_y = g.get("y", {"start": 0.01, "stop": 100.0, "num": 21, "scale": "log"})
    t_grid = grid_from_spec(g_t, "grids.t")
    x_grid = grid_from_spec(g_x, "grids.x")
    y_grid = grid_from_spec(g_y, "grids.y")
    if np.any(t_grid < 0) or np.any(t_grid >= T):
        raise ConfigError(f"times must lie in [0, T) with T={T}", "grids.t")
    if np.any(x_grid <= 0):
        raise ConfigError("wealth grid must be positive", "grids.x")
    if np.any(y_grid <= 0):
        raise ConfigError("dual grid must be positive", "grids.y")

    app = _section(doc, "application", {"cvar", "risk"})
    cv = app.get("cvar", {})
    if not isinstance(cv, dict) or set(cv) - {"beta", "lambdas"}:
        raise ConfigError("expected an object with beta and lambdas", "application.cvar")
    beta = _typed(cv, "beta", float, 0.9, "application.cvar")
    if not 0 < beta < 1:
        raise ConfigError("beta must lie in (0,1)", "application.cvar.beta")
    lams = cv.get("lambdas", [0.0, 0.25, 0.5, 1.0, 2.0])
    lambdas = tuple(grid_from_spec(lams, "application.cvar.lambdas").tolist())
    if any(l < 0 for l in lambdas):
        raise ConfigError("lambdas must be >= 0", "application.cvar.lambdas")
    rk = app.get("risk", {})
    if not isinstance(rk, dict) or set(rk) - {"t", "x"}:
        raise ConfigError("expected an object with t and x", "application.risk")
    r_t_spec = rk.get("t", [0.0, 0.5 * T, 0.9 * T])
    r_x_spec = rk.get("x", {"start": 0.1, "stop": 10.0, "num": 15, "scale": "log"})
    risk_t = grid_from_spec(r_t_spec, "application.risk.t")
    risk_x = grid_from_spec(r_x_spec, "application.risk.x")
    if np.any(risk_t < 0) or np.any(risk_t >= T):
        raise ConfigError("times must lie in [0, T)", "application.risk.t")
    if np.any(risk_x <= 0):
        raise ConfigError("wealth grid must be positive", "application.risk.x")

    o = _section(doc, "output", {"dir", "per_path_samples"})
    out_dir = _typed(o, "dir", str, "out", "output")
    per_path = _typed(o, "per_path_samples", bool, False, "output")

    raw = {
        "seed": seed,
        "market": market.to_dict(),
        "utility": utility.to_dict(),
        "quadrature": quad.to_dict(),
        "simulation": {k: v for k, v in sim.to_dict().items() if k != "seed"},
        "x0": x0,
        "grids": {"t": g_t, "x": g_x, "y": g_y},
        "application": {"cvar": {"beta": beta, "lambdas": lams}, "risk": {"t": r_t_spec, "x": r_x_spec}},
        "output": {"dir": out_dir, "per_path_samples": per_path},
    }
    if "growth" in doc["utility"]:
        raw["utility"]["growth"] = doc["utility"]["growth"]
    return ScenarioConfig(
        raw, market, utility, quad, sim, x0, t_grid, x_grid, y_grid, beta, lambdas, risk_t, risk_x, per_path, out_dir
    )

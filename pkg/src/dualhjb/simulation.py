"""Monte Carlo for the wealth and dual processes under feedback controls.

Paths are split into fixed-size blocks.  Block ``b`` draws from its own
Philox stream keyed by ``(seed, b)``, so the samples do not depend on how
many workers run the blocks or in which order they finish.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .dual import QuadratureConfig, _cuts, _m_derivs, inverse_y
from .errors import ConfigError, DomainError, SimulationError
from .market import EffectiveMarket, MarketParams
from .primal import PrimalSurface, u_value

__all__ = [
    "SimConfig",
    "PathBatchResult",
    "Control",
    "ConstantControl",
    "ZeroControl",
    "OptimalFeedback",
    "time_grid",
    "simulate_wealth",
    "simulate_dual",
    "verify_value",
    "duality_pairing_check",
    "novikov_diagnostic",
    "VerificationReport",
    "PairingReport",
    "NovikovReport",
]

_SCHEMES = ("log-euler",)


@dataclass(frozen=True)
class SimConfig:
    paths: int = 100_000
    steps_per_year: int = 250
    seed: int = 0
    scheme: str = "log-euler"
    antithetic: bool = True
    workers: int = 1
    block_size: int = 8192

    def __post_init__(self):
        if self.paths < 2:
            raise ConfigError("paths must be >= 2", "simulation.paths")
        if self.steps_per_year < 1:
            raise ConfigError("steps_per_year must be >= 1", "simulation.steps_per_year")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "simulation.seed")
        if self.scheme not in _SCHEMES:
            raise ConfigError(f"scheme must be one of {_SCHEMES}", "simulation.scheme")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1", "simulation.workers")
        if self.block_size < 2 or self.block_size % 2:
            raise ConfigError("block_size must be an even integer >= 2", "simulation.block_size")
        if self.antithetic and self.paths % 2:
            raise ConfigError("antithetic sampling needs an even path count", "simulation.paths")

    def replace(self, **kw) -> "SimConfig":
        d = self.__dict__.copy()
        d.update(kw)
        return SimConfig(**d)

    def blocks(self) -> list[tuple[int, int]]:
        """(block index, path count) pairs covering all paths."""
        out = []
        start = 0
        b = 0
        while start < self.paths:
            n = min(self.block_size, self.paths - start)
            out.append((b, n))
            start += n
            b += 1
        return out

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def time_grid(mp: MarketParams, steps_per_year: int) -> np.ndarray:
    """Step times aligned with the coefficient grid, about ``steps_per_year`` per unit time."""
    pts = [np.zeros(1)]
    for a, b in zip(mp.grid[:-1], mp.grid[1:]):
        n = max(1, int(round(steps_per_year * (b - a))))
        pts.append(np.linspace(a, b, n + 1)[1:])
    return np.concatenate(pts)


class Control(Protocol):
    def __call__(self, t: float, x: np.ndarray) -> np.ndarray: ...


class ConstantControl:
    """The same wealth fractions at every (t, x)."""

    def __init__(self, pi):
        self.pi = np.atleast_1d(np.asarray(pi, dtype=float))

    def __call__(self, t, x):
        return np.broadcast_to(self.pi, (np.size(x), self.pi.size))


class ZeroControl(ConstantControl):
    def __init__(self, n: int):
        super().__init__(np.zeros(n))


class OptimalFeedback:
    """``scale * pi*(t, x)`` read from per-step tables of the control factor.

    At each step time the factor ``Y V^_yy(Y) / x`` is tabulated on a
    lattice in ``ln y`` spanning the wealth range ``x0 exp(+-log_range)``,
    refined around the images of the dual breakpoints, and interpolated
    linearly in ``ln x``.  Wealth
    outside the range uses the end values.
    """

    def __init__(
        self,
        ps: PrimalSurface,
        x0: float,
        scale: float = 1.0,
        log_range: float = 10.0,
        lattice: int = 401,
        quad: QuadratureConfig | None = None,
        tables: dict | None = None,
    ):
        self.ps = ps
        self.x0 = float(x0)
        self.scale = float(scale)
        self.log_range = log_range
        self.lattice = lattice
        self.quad = quad or QuadratureConfig(ps.dual.quad.half_width, 401)
        self._tables = {} if tables is None else tables

    def scaled(self, scale: float) -> "OptimalFeedback":
        """Same tables, different multiple of pi*."""
        return OptimalFeedback(
            self.ps, self.x0, scale, self.log_range, self.lattice, self.quad, self._tables
        )

    def _table(self, t: float):
        tab = self._tables.get(t)
        if tab is not None:
            return tab
        ds = self.ps.dual
        tau = ds.tau(t)
        xs = self.x0 * np.exp([self.log_range, -self.log_range])
        ys = inverse_y(ds, t, xs, 1e-8)
        m_lo, m_hi = math.log(ys[0]), math.log(ys[1])
        parts = [np.linspace(m_lo, m_hi, self.lattice)]
        # resolve the smoothed kinks, whose width in ln y is sqrt(2 tau)
        w = 8.0 * math.sqrt(2.0 * tau)
        for b in _cuts(ds.dual_utility):
            c = math.log(b) + tau
            if c + w > m_lo and c - w < m_hi:
                parts.append(np.clip(np.linspace(c - w, c + w, 201), m_lo, m_hi))
        m = np.unique(np.concatenate(parts))
        _, vm, vmm = _m_derivs(ds.with_quad(self.quad), tau, np.exp(m))
        ok = vm < 0
        lx = np.log(-vm[ok]) - m[ok]
        fac = (vmm[ok] - vm[ok]) / (-vm[ok])
        tab = (lx[::-1].copy(), fac[::-1].copy(), self.ps.market.direction(t))
        self._tables[t] = tab
        return tab

    def prepare(self, times) -> None:
        for t in times:
            if t < self.ps.T:
                self._table(float(t))

    def factor(self, t: float, x: np.ndarray) -> np.ndarray:
        lx, fac, _ = self._table(float(t))
        return np.interp(np.log(x), lx, fac)

    def __call__(self, t, x):
        lx, fac, d = self._table(float(t))
        f = np.interp(np.log(x), lx, fac)
        return (self.scale * f)[:, None] * d[None, :]


@dataclass
class PathBatchResult:
    terminal_wealth: np.ndarray
    control_norms: np.ndarray
    terminal_dual: np.ndarray | None = None
    mean: float = math.nan
    stderr: float = math.nan
    antithetic: bool = False
    pairs: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def paths(self) -> int:
        return self.terminal_wealth.size

    def estimate(self, values: np.ndarray) -> tuple[float, float]:
        """Mean and standard error of per-path ``values``, respecting antithetic pairs."""
        values = np.asarray(values, dtype=float)
        if self.antithetic and self.pairs is not None:
            a, b = self.pairs
            values = 0.5 * (values[a] + values[b])
        n = values.size
        mean = float(np.mean(values))
        se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
        return mean, se


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _run_block(mp, control, x0, times, cfg, block, n_paths, dual_theta, y0):
    rng = _block_rng(cfg.seed, block)
    n = mp.n
    half = n_paths // 2 if cfg.antithetic else n_paths
    lx = np.full(n_paths, math.log(x0))
    ly = np.full(n_paths, math.log(y0)) if dual_theta is not None else None
    norms = np.zeros(n_paths)
    cone = mp.cone
    for s in range(times.size - 1):
        t, dt = times[s], times[s + 1] - times[s]
        k = mp.interval(t)
        z = rng.standard_normal((half, n))
        if cfg.antithetic:
            z = np.concatenate([z, -z])
        dw = z * math.sqrt(dt)
        if control is not None:
            pi = np.asarray(control(t, np.exp(lx)), dtype=float)
            if pi.shape != (n_paths, n):
                raise SimulationError(f"control returned shape {pi.shape} at step {s}")
            if not cone.kind == "whole":
                bad = ~cone.contains_rows(pi, 1e-8)
                if bad.any():
                    raise SimulationError(
                        f"control left the trading cone at step {s} (t={t:g}): pi={pi[np.argmax(bad)]}"
                    )
            ps = pi @ mp.sigma[k]  # rows pi' sigma
            q = np.einsum("ij,ij->i", ps, ps)
            lx += (pi @ mp.b[k] - 0.5 * q) * dt + np.einsum("ij,ij->i", ps, dw)
            norms += q * dt
        if ly is not None:
            th = dual_theta[k]
            ly += -0.5 * float(th @ th) * dt - dw @ th
    return np.exp(lx), norms, (np.exp(ly) if ly is not None else None)


def simulate_wealth(
    mp: MarketParams,
    control: Control | None,
    x0: float,
    cfg: SimConfig,
    utility=None,
    dual: tuple[EffectiveMarket, float] | None = None,
) -> PathBatchResult:
    """Log-Euler paths of wealth under a feedback control.

    ``control=None`` means holding no risky assets.  When ``utility`` is
    given the estimator is ``E[U(X_T)]``, otherwise ``E[X_T]``.  ``dual``
    ``(em, y0)`` also advances the dual process on the same Brownian
    increments.
    """
    if not x0 > 0:
        raise DomainError("x0 must be positive")
    times = time_grid(mp, cfg.steps_per_year)
    if hasattr(control, "prepare"):
        control.prepare(times[:-1])
    theta, y0 = (None, None)
    if dual is not None:
        em, y0 = dual
        if not y0 > 0:
            raise DomainError("y0 must be positive")
        theta = em.theta_hat
    blocks = cfg.blocks()

    def job(bn):
        return _run_block(mp, control, x0, times, cfg, bn[0], bn[1], theta, y0)

    if cfg.workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            parts = list(ex.map(job, blocks))
    else:
        parts = [job(b) for b in blocks]
    xT = np.concatenate([p[0] for p in parts])
    norms = np.concatenate([p[1] for p in parts])
    yT = np.concatenate([p[2] for p in parts]) if dual is not None else None
    pairs = None
    if cfg.antithetic:
        a, b, start = [], [], 0
        for _, n in blocks:
            h = n // 2
            a.append(np.arange(start, start + h))
            b.append(np.arange(start + h, start + n))
            start += n
        pairs = (np.concatenate(a), np.concatenate(b))
    res = PathBatchResult(xT, norms, yT, antithetic=cfg.antithetic, pairs=pairs)
    vals = np.asarray(utility(xT), dtype=float) if utility is not None else xT
    res.mean, res.stderr = res.estimate(vals)
    return res


def simulate_dual(em: EffectiveMarket, y0: float, cfg: SimConfig, fn=None) -> PathBatchResult:
    """Exact lognormal samples of the dual process at T (one draw per coefficient interval).

    The estimator is ``E[fn(Y_T)]`` (``E[Y_T]`` by default).
    """
    if not y0 > 0:
        raise DomainError("y0 must be positive")
    mp = em.params
    times = mp.grid
    blocks = cfg.blocks()

    def job(bn):
        b, n_paths = bn
        rng = _block_rng(cfg.seed, b)
        half = n_paths // 2 if cfg.antithetic else n_paths
        ly = np.full(n_paths, math.log(y0))
        for k in range(mp.intervals):
            dt = times[k + 1] - times[k]
            z = rng.standard_normal((half, mp.n))
            if cfg.antithetic:
                z = np.concatenate([z, -z])
            th = em.theta_hat[k]
            ly += -0.5 * float(th @ th) * dt - (z @ th) * math.sqrt(dt)
        return np.exp(ly)

    if cfg.workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            yT = np.concatenate(list(ex.map(job, blocks)))
    else:
        yT = np.concatenate([job(b) for b in blocks])
    pairs = None
    if cfg.antithetic:
        a, b, start = [], [], 0
        for _, n in blocks:
            a.append(np.arange(start, start + n // 2))
            b.append(np.arange(start + n // 2, start + n))
            start += n
        pairs = (np.concatenate(a), np.concatenate(b))
    res = PathBatchResult(np.full(yT.size, np.nan), np.zeros(yT.size), yT, antithetic=cfg.antithetic, pairs=pairs)
    res.mean, res.stderr = res.estimate(fn(yT) if fn is not None else yT)
    return res


@dataclass
class ControlOutcome:
    name: str
    mean: float
    stderr: float
    z: float  # (mean - target) / stderr
    passed: bool


@dataclass
class VerificationReport:
    target: float
    optimal: ControlOutcome
    basket: list[ControlOutcome]

    @property
    def passed(self) -> bool:
        return self.optimal.passed and all(c.passed for c in self.basket)

    def rows(self) -> list[ControlOutcome]:
        return [self.optimal] + self.basket


def _below(mean, se, target, n_se):
    """One-sided check with a rounding allowance for deterministic estimators."""
    return mean <= target + n_se * se + 1e-12 * max(1.0, abs(target))


def _zscore(mean, se, target):
    # gaps at rounding level carry no signal, whatever the standard error
    if abs(mean - target) <= 1e-12 * max(1.0, abs(target)):
        return 0.0
    if se > 0:
        return (mean - target) / se
    return 0.0 if mean == target else math.copysign(math.inf, mean - target)


def verify_value(
    ps: PrimalSurface,
    mp: MarketParams,
    cfg: SimConfig,
    x0: float,
    n_se: float = 3.0,
    feedback: OptimalFeedback | None = None,
) -> VerificationReport:
    """Compare E[U(X_T)] under pi* with u(0, x0); check the suboptimal basket stays below."""
    target = u_value(ps, 0.0, x0)
    fb = feedback or OptimalFeedback(ps, x0)
    opt = simulate_wealth(mp, fb, x0, cfg, ps.utility)
    z = _zscore(opt.mean, opt.stderr, target)
    optimal = ControlOutcome("optimal", opt.mean, opt.stderr, z, abs(z) <= n_se)
    basket = []
    for name, ctrl in (("zero", None), ("half", fb.scaled(0.5)), ("double", fb.scaled(2.0))):
        r = simulate_wealth(mp, ctrl, x0, cfg, ps.utility)
        zz = _zscore(r.mean, r.stderr, target)
        basket.append(ControlOutcome(name, r.mean, r.stderr, zz, _below(r.mean, r.stderr, target, n_se)))
    return VerificationReport(target, optimal, basket)


@dataclass
class PairingReport:
    target: float  # x0 * y*
    y_star: float
    optimal: ControlOutcome
    basket: list[ControlOutcome]

    @property
    def passed(self) -> bool:
        return self.optimal.passed and all(c.passed for c in self.basket)

    def rows(self) -> list[ControlOutcome]:
        return [self.optimal] + self.basket


def duality_pairing_check(
    ps: PrimalSurface,
    em: EffectiveMarket,
    mp: MarketParams,
    cfg: SimConfig,
    x0: float,
    n_se: float = 3.0,
    feedback: OptimalFeedback | None = None,
) -> PairingReport:
    """E[X_T Y_T] against x0 y* with y* = u_x(0, x0), on shared increments."""
    y_star = inverse_y(ps.dual, 0.0, x0, 1e-12)
    target = x0 * y_star
    fb = feedback or OptimalFeedback(ps, x0)

    def run(ctrl):
        r = simulate_wealth(mp, ctrl, x0, cfg, dual=(em, y_star))
        return r.estimate(r.terminal_wealth * r.terminal_dual)

    m, se = run(fb)
    z = _zscore(m, se, target)
    optimal = ControlOutcome("optimal", m, se, z, abs(z) <= n_se)
    basket = []
    for name, ctrl in (("zero", None), ("half", fb.scaled(0.5)), ("double", fb.scaled(2.0))):
        mm, ss = run(ctrl)
        basket.append(ControlOutcome(name, mm, ss, _zscore(mm, ss, target), _below(mm, ss, target, n_se)))
    return PairingReport(target, y_star, optimal, basket)


@dataclass
class NovikovReport:
    mean: float
    max: float
    ratio: float
    growth: float  # mean on all paths / mean on the first quarter
    overflowed: int
    suspect: bool


def novikov_diagnostic(batch: PathBatchResult, ratio_flag: float = 1e3, growth_flag: float = 1.5) -> NovikovReport:
    """Sample statistics of ``exp(1/2 int |pi' sigma|^2 dt)`` over paths.

    Exponents above 700 are clamped and counted.  ``suspect`` is a
    heuristic flag for heavy tails, not a proof either way.
    """
    e = 0.5 * np.asarray(batch.control_norms, dtype=float)
    over = int(np.count_nonzero(e > 700.0))
    stat = np.exp(np.minimum(e, 700.0))
    mean = float(np.mean(stat))
    mx = float(np.max(stat))
    q = max(1, stat.size // 4)
    growth = mean / float(np.mean(stat[:q]))
    ratio = mx / mean
    return NovikovReport(mean, mx, ratio, growth, over, bool(over or ratio > ratio_flag or growth > growth_flag))

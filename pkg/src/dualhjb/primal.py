"""Primal value u(t, x) = inf_y (V^(t, y) + x y) and the optimal feedback."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._solvers import golden_section_max
from .dual import (
    DualSurface,
    QuadratureConfig,
    hat_v,
    hat_v_derivs,
    inverse_y,
)
from .errors import DomainError, SolverError
from .market import EffectiveMarket, MarketParams
from .utility import CheckResult, UtilityFunction, conjugate

__all__ = [
    "PrimalSurface",
    "ControlVector",
    "ResidualReport",
    "build_surface",
    "growth_constants",
    "u_value",
    "u_derivs",
    "optimal_control",
    "hamiltonian",
    "hamiltonian_integrand",
    "hjb_residual_grid",
    "growth_check",
    "primal_from_dual_grid",
    "dual_from_primal_grid",
]


def growth_constants(L_hat: float, p: float, tau0: float) -> tuple[float, float]:
    """Return ``(K, K~)``: the dual and primal growth constants.

    ``K = L^ exp(p tau0 / (p-1)^2)`` bounds V^ by ``K (1 + y^{p/(p-1)})`` and
    ``K~ = K + (1/p)((1-p)/(K p))^{p-1}`` bounds u by ``K~ (1 + x^p)``.
    """
    K = L_hat * math.exp(p * tau0 / (p - 1.0) ** 2)
    Kt = K + (1.0 / p) * ((1.0 - p) / (K * p)) ** (p - 1.0)
    return K, Kt


@dataclass(frozen=True, eq=False)
class PrimalSurface:
    dual: DualSurface
    utility: UtilityFunction
    growth_bound: float

    @property
    def T(self) -> float:
        return self.dual.T

    @property
    def market(self) -> EffectiveMarket:
        return self.dual.market


def build_surface(
    u: UtilityFunction,
    market: MarketParams | EffectiveMarket,
    quad: QuadratureConfig | None = None,
) -> PrimalSurface:
    """Conjugate, dual surface and primal surface in one step."""
    em = market if isinstance(market, EffectiveMarket) else EffectiveMarket.from_params(market)
    du = conjugate(u)
    ds = DualSurface(du, em, quad or QuadratureConfig())
    _, Kt = growth_constants(du.dual_growth, u.growth.p, ds.tau(0.0))
    return PrimalSurface(ds, u, Kt)


@dataclass(frozen=True)
class ControlVector:
    """Fractions of wealth held in each risky asset."""

    pi: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.pi, dtype=dtype)


def _check_tx(ps: PrimalSurface, t: float, x: float, interior: bool):
    if not 0.0 <= t <= ps.T:
        raise DomainError(f"t={t} outside [0, {ps.T}]")
    if x < 0 or not math.isfinite(x):
        raise DomainError(f"x must be a nonnegative number, got {x}")
    if interior and not (t < ps.T and x > 0):
        raise DomainError("requires t < T and x > 0")


def u_value(ps: PrimalSurface, t: float, x: float, tol: float = 1e-12, y0: float | None = None) -> float:
    """u(t, x); boundary values ``u(T, x) = U(x)`` and ``u(t, 0) = 0``."""
    x = float(x)
    _check_tx(ps, t, x, interior=False)
    if x == 0.0:
        return 0.0
    if t >= ps.T:
        return float(ps.utility(x))
    y = inverse_y(ps.dual, t, x, tol, y0)
    return float(hat_v(ps.dual, t, y)) + x * y


def _state(ps: PrimalSurface, t: float, x: float, tol: float, y0=None):
    y = inverse_y(ps.dual, t, x, tol, y0)
    v, vy, vyy = hat_v_derivs(ps.dual, t, y)
    return y, v, vy, vyy


def u_derivs(ps: PrimalSurface, t: float, x: float, tol: float = 1e-12, y0: float | None = None):
    """Return ``(u, u_t, u_x, u_xx)`` through the dual identities."""
    x = float(x)
    _check_tx(ps, t, x, interior=True)
    y, v, _, vyy = _state(ps, t, x, tol, y0)
    u = v + x * y
    u_t = -0.5 * ps.dual.theta_hat_norm2(t) * y * y * vyy
    return u, u_t, y, -1.0 / vyy


def optimal_control(ps: PrimalSurface, t: float, x: float, tol: float = 1e-12) -> ControlVector:
    """``pi* = (sigma')^{-1} theta_hat * Y V^_yy(Y) / x``."""
    x = float(x)
    _check_tx(ps, t, x, interior=True)
    y, _, _, vyy = _state(ps, t, x, tol)
    pi = ps.market.direction(t) * (y * vyy / x)
    if not ps.market.params.cone.contains(pi, 1e-8):
        raise SolverError(f"pi* = {pi} at (t={t}, x={x}) is outside the trading cone")
    return ControlVector(pi)


def hamiltonian(t: float, x: float, p_slope: float, M: float, em: EffectiveMarket) -> float:
    """``sup_{pi in K} [pi'b x p + 1/2 |sigma'pi|^2 x^2 M] = -p^2 |theta_hat|^2 / (2M)``.

    Returns ``inf`` when ``M >= 0``.
    """
    if not p_slope > 0:
        raise DomainError("p_slope must be positive")
    if M >= 0:
        return math.inf
    return -(p_slope**2) * em.theta_hat_norm2(t) / (2.0 * M)


def hamiltonian_integrand(t: float, x: float, p_slope: float, M: float, pi, mp: MarketParams) -> float:
    """The expression maximized by `hamiltonian`, at a given control."""
    k = mp.interval(t)
    pi = np.asarray(pi, dtype=float)
    sp = mp.sigma[k].T @ pi
    return float(pi @ mp.b[k] * x * p_slope + 0.5 * (sp @ sp) * x * x * M)


@dataclass
class ResidualReport:
    """Scaled residuals ``|u_t u_xx - 1/2 |theta_hat|^2 u_x^2| / (|u_t u_xx| + 1/2 |theta_hat|^2 u_x^2)``.

    ``resolved`` is False where rounding noise in the second difference
    (estimated from machine epsilon and the stencil width) could exceed
    ``noise_limit``; there the residual measures float noise, not the solution.
    """

    ts: np.ndarray
    xs: np.ndarray
    residual: np.ndarray
    resolved: np.ndarray | None = None

    def __post_init__(self):
        if self.resolved is None:
            self.resolved = np.ones(self.residual.shape, dtype=bool)

    @property
    def max(self) -> float:
        return float(np.max(self.residual))

    @property
    def mean(self) -> float:
        return float(np.mean(self.residual))

    @property
    def max_resolved(self) -> float:
        return float(np.max(self.residual[self.resolved], initial=0.0))

    def unresolved(self) -> list[tuple[float, float]]:
        i, j = np.nonzero(~self.resolved)
        return [(float(self.ts[a]), float(self.xs[b])) for a, b in zip(i, j)]

    def argmax(self) -> tuple[float, float]:
        i, j = np.unravel_index(int(np.argmax(self.residual)), self.residual.shape)
        return float(self.ts[i]), float(self.xs[j])


def _u_row(ps: PrimalSurface, t: float, xs: np.ndarray, tol: float) -> np.ndarray:
    ys = inverse_y(ps.dual, t, xs, tol)
    return hat_v(ps.dual, t, ys) + xs * ys


def _t_derivative(ps: PrimalSurface, t: float, xs, h: float, u0: np.ndarray, tol: float):
    """Second-order difference in t that stays inside one coefficient interval."""
    grid = ps.market.params.grid
    k = ps.market.params.interval(t)
    a, b = grid[k], min(grid[k + 1], ps.T)
    h = min(h, 0.5 * (b - a))
    if t - h >= a and t + h <= b and t + h < ps.T:
        return (_u_row(ps, t + h, xs, tol) - _u_row(ps, t - h, xs, tol)) / (2.0 * h)
    if t + 2.0 * h < b or (t + 2.0 * h <= b and b < ps.T):
        f1, f2 = _u_row(ps, t + h, xs, tol), _u_row(ps, t + 2.0 * h, xs, tol)
        return (-3.0 * u0 + 4.0 * f1 - f2) / (2.0 * h)
    f1, f2 = _u_row(ps, t - h, xs, tol), _u_row(ps, t - 2.0 * h, xs, tol)
    return (3.0 * u0 - 4.0 * f1 + f2) / (2.0 * h)


def hjb_residual_grid(
    ps: PrimalSurface, ts, xs, step: float = 0.01, tol: float = 1e-13, noise_limit: float = 1e-6
) -> ResidualReport:
    """Finite-difference HJB residual in product form on ``ts x xs``.

    Derivatives are differences of `u_value`.  Steps follow the local
    smoothing scale so that halving ``step`` refines every stencil by the
    same factor: ``h_t = step (T - t)`` and
    ``h_x = step min(1, s) min(x, l)`` with ``s = sqrt(2 tau(t))`` and
    ``l = u_x / |u_xx| = Y V^_yy(Y)``.  The second factor matters near
    kinks of U, where u_x turns over on an x-scale of order ``l s``.
    """
    ts = np.asarray(ts, dtype=float)
    xs = np.asarray(xs, dtype=float)
    if np.any(ts >= ps.T) or np.any(xs <= 0):
        raise DomainError("residual grid must be interior (t < T, x > 0)")
    res = np.empty((ts.size, xs.size))
    ok = np.empty((ts.size, xs.size), dtype=bool)
    eps = np.finfo(float).eps
    for i, t in enumerate(ts):
        h_t = step * (ps.T - t)
        ys = inverse_y(ps.dual, t, xs, tol)
        v, _, vyy = hat_v_derivs(ps.dual, t, ys)
        ell = ys * vyy
        hx = step * min(1.0, math.sqrt(2.0 * ps.dual.tau(t))) * np.minimum(xs, ell)
        xx = np.concatenate([xs - hx, xs, xs + hx])
        row = _u_row(ps, t, xx, tol).reshape(3, -1)
        u_t = _t_derivative(ps, t, xs, h_t, row[1], tol)
        u_x = (row[2] - row[0]) / (2.0 * hx)
        u_xx = (row[2] - 2.0 * row[1] + row[0]) / (hx * hx)
        a = u_t * u_xx
        b = 0.5 * ps.dual.theta_hat_norm2(t) * u_x * u_x
        res[i] = np.abs(a - b) / (np.abs(a) + np.abs(b))
        # u = V^ + x Y is formed with cancellation of size |V^| + x Y
        noise = 4.0 * eps * (np.abs(v) + xs * ys) * ell / (ys * hx * hx)
        ok[i] = noise <= noise_limit
    return ResidualReport(ts, xs, res, ok)


def growth_check(ps: PrimalSurface, ts, xs) -> CheckResult:
    """``0 <= u(t, x) <= K~ (1 + x^p)`` on the grid, plus monotonicity in t.

    ``ts`` must be increasing; the check requires ``u(t1, x) >= u(t2, x) >= U(x)``
    for ``t1 < t2``.
    """
    ts = np.asarray(ts, dtype=float)
    xs = np.asarray(xs, dtype=float)
    p = ps.utility.growth.p
    vals = np.array([[u_value(ps, float(t), float(x)) for x in xs] for t in ts])
    bound = ps.growth_bound * (1.0 + xs**p)
    U = np.asarray(ps.utility(xs), dtype=float)
    slack = 1e-10 * np.maximum(1.0, np.abs(vals))
    ok_bound = bool(np.all(vals >= -slack) and np.all(vals <= bound + slack))
    ok_mono = bool(np.all(np.diff(vals, axis=0) <= slack[1:]) and np.all(vals >= U - slack))
    detail = f"K~ = {ps.growth_bound:.6g}, max u/bound = {np.max(vals / bound):.6g}"
    if not ok_mono:
        detail += "; u not monotone in t"
    return CheckResult(ok_bound and ok_mono, None, detail)


def _refine_max(f, grid: np.ndarray, tol: float) -> tuple[float, float]:
    """Grid maximum followed by golden-section refinement on the neighbouring cells."""
    vals = np.array([f(g) for g in grid])
    j = int(np.argmax(vals))
    lo = grid[max(j - 1, 0)]
    hi = grid[min(j + 1, grid.size - 1)]
    if hi <= lo:
        return float(grid[j]), float(vals[j])
    return golden_section_max(f, lo, hi, tol)


def primal_from_dual_grid(ps: PrimalSurface, t: float, x: float, ys: np.ndarray, tol: float = 1e-12) -> float:
    """``inf_y (V^(t, y) + x y)`` by brute-force search on ln y."""
    lys = np.log(np.asarray(ys, dtype=float))
    _, val = _refine_max(lambda z: -(float(hat_v(ps.dual, t, math.exp(z))) + x * math.exp(z)), lys, tol)
    return -val


def dual_from_primal_grid(ps: PrimalSurface, t: float, y: float, xs: np.ndarray, tol: float = 1e-12) -> float:
    """``sup_x (u(t, x) - x y)`` by brute-force search on ln x."""
    lxs = np.log(np.asarray(xs, dtype=float))
    _, val = _refine_max(lambda z: u_value(ps, t, math.exp(z)) - y * math.exp(z), lxs, tol)
    return val

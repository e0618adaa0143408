"""Utility-CVaR frontier via a two-stage decomposition, and risk-aversion profiles.

For a loss ``Z = U(x0) - U(X_T)``, ``CVaR_beta(Z) = min_y [y + delta E(Z - y)^+]``
with ``delta = 1 / (1 - beta)``.  Maximizing ``E[U(X_T)] - lambda CVaR``
splits into an inner utility problem with the modified utility

    U^y(x) = U(x) - k (U(x0) - U(x) - y)^+ + k (U(x0) - y)^+,   k = lambda delta,

and an outer concave maximization over the scalar y.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._solvers import golden_section_max
from .dual import QuadratureConfig, hat_v_derivs, inverse_y, w_surface
from .errors import CapabilityError, ConfigError, DomainError, SolverError
from .market import EffectiveMarket
from .primal import PrimalSurface, build_surface, u_value
from .simulation import OptimalFeedback, SimConfig, simulate_wealth
from .utility import (
    Branch,
    HingedUtility,
    PiecewiseUtility,
    PowerUtility,
    UtilityFunction,
    conjugate,
    validate_assumption1,
)

__all__ = [
    "CvarSpec",
    "FrontierPoint",
    "Pipeline",
    "build_modified_utility",
    "inner_value",
    "outer_objective",
    "outer_optimize",
    "cvar_var_of_sample",
    "cvar_tail_average",
    "frontier_sweep",
    "frontier_monotone",
    "static_risk_aversion",
    "dynamic_risk_aversion",
    "monotonicity_report",
    "MonotonicityReport",
]


@dataclass(frozen=True)
class CvarSpec:
    beta: float
    lam: float
    x0: float

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must lie in (0,1)", "application.cvar.beta")
        if not self.lam >= 0:
            raise ConfigError("lambda must be >= 0", "application.cvar.lambda")
        if not self.x0 > 0:
            raise ConfigError("x0 must be positive", "application.cvar.x0")

    @property
    def delta(self) -> float:
        return 1.0 / (1.0 - self.beta)

    def with_lambda(self, lam: float) -> "CvarSpec":
        return CvarSpec(self.beta, lam, self.x0)


@dataclass(frozen=True, eq=False)
class Pipeline:
    """Everything needed to turn a utility into a primal surface."""

    utility: UtilityFunction
    market: EffectiveMarket
    quad: QuadratureConfig = QuadratureConfig()

    def surface(self, u: UtilityFunction | None = None) -> PrimalSurface:
        return build_surface(u or self.utility, self.market, self.quad)


# ------------------------------------------------------------ modified utility


def _as_branches(u: UtilityFunction):
    if isinstance(u, PowerUtility):
        return [Branch(u.scale, u.p)], []
    if isinstance(u, PiecewiseUtility):
        return list(u.branches), list(u.crossovers)
    return None


def _split_at_level(branches, crossovers, level: float):
    """Index of the branch where U crosses ``level`` and the crossing point."""
    edges = [0.0] + list(crossovers) + [math.inf]
    for i, b in enumerate(branches):
        hi = edges[i + 1]
        top = b.value(hi) if math.isfinite(hi) else math.inf
        if level <= top:
            if b.coef == 0:
                continue
            return i, ((level - b.offset) / b.coef) ** (1.0 / b.exponent)
    raise DomainError(f"utility never reaches level {level}")


def build_modified_utility(u: UtilityFunction, spec: CvarSpec, y: float) -> UtilityFunction:
    """U^y for the CVaR scalarization.

    With ``c = U(x0) - y`` and ``k = lambda delta``, ``U^y = U`` when
    ``c <= 0`` or ``k = 0``, and ``min((1 + k) U, U + k c)`` otherwise.
    Power and piecewise bases stay piecewise; other families are wrapped.
    """
    c = float(u(spec.x0)) - y
    k = spec.lam * spec.delta
    if c <= 0 or k == 0:
        return u
    rep = _as_branches(u)
    if rep is None:
        out = HingedUtility(u, k, c)
    else:
        branches, crossovers = rep
        i, xc = _split_at_level(branches, crossovers, c)
        edges = [0.0] + list(crossovers) + [math.inf]
        low = [b.affine(1.0 + k, 0.0) for b in branches[: i + 1]]
        high = [b.affine(1.0, k * c) for b in branches[i:]]
        new_cross = list(crossovers[:i]) + [xc] + list(crossovers[i:])
        # a crossing on an existing crossover leaves a zero-length piece
        if xc <= edges[i] * (1 + 1e-12):
            low.pop()
            new_cross.pop(i)
        elif xc >= edges[i + 1] * (1 - 1e-12):
            high.pop(0)
            new_cross.pop(i)
        out = PiecewiseUtility(low + high, new_cross)
    rep = validate_assumption1(out)
    if not rep.passed:
        raise SolverError(f"modified utility fails the utility assumptions: {rep.failures()}")
    return out


def inner_value(spec: CvarSpec, y: float, pipe: Pipeline) -> float:
    """u(0, x0) for the modified utility U^y."""
    return u_value(pipe.surface(build_modified_utility(pipe.utility, spec, y)), 0.0, spec.x0)


def outer_objective(spec: CvarSpec, y: float, pipe: Pipeline) -> float:
    """``g(y) = u(x0, y) - lambda delta (U(x0) - y)^+ - lambda y``."""
    U0 = float(pipe.utility(spec.x0))
    return inner_value(spec, y, pipe) - spec.lam * spec.delta * max(U0 - y, 0.0) - spec.lam * y


def outer_optimize(
    spec: CvarSpec, pipe: Pipeline, bracket: tuple[float, float] | None = None, tol: float = 1e-7, max_expand: int = 30
) -> tuple[float, float]:
    """Golden-section maximization of the outer objective; returns ``(y*, g(y*))``.

    The bracket defaults to ``[U(x0) - 10 (1 + |U(x0)|), U(x0)]``; its lower
    end is pushed down geometrically while the maximum sits on it.
    """
    U0 = float(pipe.utility(spec.x0))
    if spec.lam == 0:
        return U0, inner_value(spec, U0, pipe)
    lo, hi = bracket or (U0 - 10.0 * (1.0 + abs(U0)), U0)
    g = lambda y: outer_objective(spec, y, pipe)  # noqa: E731
    width = hi - lo
    for _ in range(max_expand):
        y, val = golden_section_max(g, lo, hi, tol)
        if y - lo > 1e-3 * (hi - lo):
            return y, val
        width *= 2.0
        lo = hi - width
    raise SolverError(f"outer bracket expansion failed: g({lo:g}) = {g(lo):g}, g({hi:g}) = {g(hi):g}")


# ----------------------------------------------------------------------- CVaR


def _tail_index(n: int, beta: float) -> int:
    """Smallest k (1-based) with k / n >= beta, guarded against float noise."""
    k = math.ceil(n * beta)
    if k > 1 and (k - 1) / n >= beta * (1.0 - 1e-12):
        k -= 1
    return max(1, min(k, n))


def cvar_var_of_sample(losses, beta: float) -> tuple[float, float]:
    """Empirical ``(CVaR, VaR)`` from the minimization formula.

    The objective ``F(y) = y + delta mean((Z - y)^+)`` is evaluated at every
    order statistic (it is piecewise linear with kinks there); CVaR is the
    minimum and VaR the left end of the minimizing set.
    """
    z = np.sort(np.asarray(losses, dtype=float).reshape(-1))
    n = z.size
    if n == 0:
        raise DomainError("empty sample")
    if not 0.0 < beta < 1.0:
        raise DomainError("beta must lie in (0,1)")
    delta = 1.0 / (1.0 - beta)
    # sum_{i > j} (z_i - z_j) for every j via suffix sums
    suffix = np.concatenate([np.cumsum(z[::-1])[::-1][1:], [0.0]])
    above = np.arange(n - 1, -1, -1)
    F = z + delta * (suffix - above * z) / n
    cvar = float(np.min(F))
    k = _tail_index(n, beta)
    var = float(z[k - 1])
    if not F[k - 1] <= cvar + 1e-9 * max(1.0, abs(cvar)):
        raise SolverError("left end of the minimizing set disagrees with the minimum")
    return cvar, var


def cvar_tail_average(losses, beta: float) -> float:
    """CVaR by direct averaging of the upper tail of the empirical law."""
    z = np.sort(np.asarray(losses, dtype=float).reshape(-1))
    n = z.size
    k = _tail_index(n, beta)
    return float(((k / n - beta) * z[k - 1] + z[k:].sum() / n) / (1.0 - beta))


@dataclass
class FrontierPoint:
    lam: float
    y_star: float
    value: float
    utility_mc: float
    cvar_mc: float
    var_mc: float
    se_utility: float
    se_cvar: float

    def __post_init__(self):
        if self.cvar_mc < self.var_mc - 1e-12 * max(1.0, abs(self.var_mc)):
            raise SolverError("CVaR below VaR")


def _frontier_point(spec: CvarSpec, pipe: Pipeline, cfg: SimConfig) -> FrontierPoint:
    y_star, value = outer_optimize(spec, pipe)
    mod = build_modified_utility(pipe.utility, spec, y_star)
    ps = pipe.surface(mod)
    res = simulate_wealth(pipe.market.params, OptimalFeedback(ps, spec.x0), spec.x0, cfg, pipe.utility)
    U0 = float(pipe.utility(spec.x0))
    loss = U0 - np.asarray(pipe.utility(res.terminal_wealth), dtype=float)
    cvar, var = cvar_var_of_sample(loss, spec.beta)
    excess = np.maximum(loss - var, 0.0) * spec.delta
    se_cvar = float(np.std(excess, ddof=1) / math.sqrt(loss.size))
    return FrontierPoint(spec.lam, y_star, value, res.mean, cvar, var, res.stderr, se_cvar)


def frontier_sweep(spec: CvarSpec, lambdas, pipe: Pipeline, cfg: SimConfig, workers: int = 1) -> list[FrontierPoint]:
    """One frontier point per lambda: outer optimum, then Monte Carlo under the modified pi*."""
    specs = [spec.with_lambda(float(l)) for l in lambdas]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(lambda s: _frontier_point(s, pipe, cfg), specs))
    return [_frontier_point(s, pipe, cfg) for s in specs]


def frontier_monotone(points: list[FrontierPoint], n_se: float = 3.0) -> bool:
    """CVaR estimates nonincreasing in lambda, up to ``n_se`` combined standard errors."""
    pts = sorted(points, key=lambda p: p.lam)
    return all(
        b.cvar_mc <= a.cvar_mc + n_se * math.hypot(a.se_cvar, b.se_cvar) for a, b in zip(pts, pts[1:])
    )


# -------------------------------------------------------------- risk aversion


def static_risk_aversion(u: UtilityFunction, x) -> float | np.ndarray:
    """``R(x) = -U''(x) / U'(x)``; raises `CapabilityError` where U is not C^2."""
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(xa <= 0):
        raise DomainError("x must be positive")
    r, l = u.slopes(xa)
    if np.any(r != l):
        raise CapabilityError("utility is not differentiable at some x")
    R = -np.asarray(u.second_derivative(xa), dtype=float) / r
    return float(R[0]) if np.ndim(x) == 0 else R.reshape(np.shape(x))


def dynamic_risk_aversion(ps: PrimalSurface, t: float, x):
    """``R(t, x) = -u_xx / u_x = 1 / (Y V^_yy(Y))`` at ``Y = Y(t, x)``."""
    if not t < ps.T:
        raise DomainError("dynamic risk aversion needs t < T")
    y = inverse_y(ps.dual, t, x, 1e-12)
    _, _, vyy = hat_v_derivs(ps.dual, t, y)
    return 1.0 / (np.asarray(y) * vyy) if np.ndim(x) else float(1.0 / (y * vyy))


def _direction(v: np.ndarray) -> str:
    d = np.diff(v)
    if np.all(d < 0):
        return "decreasing"
    if np.all(d > 0):
        return "increasing"
    if np.all(d == 0):
        return "constant"
    return "mixed"


def _sign(v: np.ndarray, tol: float) -> str:
    if np.all(v > tol):
        return "convex"
    if np.all(v < -tol):
        return "concave"
    return "mixed"


@dataclass
class MonotonicityReport:
    static_direction: str  # "decreasing", "increasing", "mixed" or "undefined"
    static: np.ndarray | None
    ts: np.ndarray
    xs: np.ndarray
    dynamic: np.ndarray  # rows over t
    dynamic_directions: list[str]
    w_shape: list[str]  # sampled curvature of w(t, .) per t
    target_shape: str  # curvature of y U~'(y) - U~(y)
    log_marginal: list[bool]  # ln u_x(t, .) second differences match ln U'
    violations: list[str] = field(default_factory=list)

    @property
    def preserved(self) -> bool:
        if self.static_direction in ("undefined", "mixed"):
            return True
        return all(d == self.static_direction for d in self.dynamic_directions)

    @property
    def w_sign_ok(self) -> bool:
        return self.target_shape == "mixed" or all(s == self.target_shape for s in self.w_shape)

    @property
    def passed(self) -> bool:
        return self.preserved and self.w_sign_ok and all(self.log_marginal)


def monotonicity_report(ps: PrimalSurface, ts, xs, ys=None) -> MonotonicityReport:
    """Compare the dynamic risk-aversion profile with the static one.

    Also samples the curvature of ``w(t, y) = y V^_y - V^`` against that of
    ``y U~'(y) - U~(y)`` on ``ys`` and the second differences of
    ``ln u_x(t, .)`` against those of ``ln U'``.
    """
    ts = np.asarray(ts, dtype=float)
    xs = np.asarray(xs, dtype=float)
    if np.any(ts >= ps.T):
        raise DomainError("times must satisfy t < T")
    u = ps.utility
    violations = []
    try:
        static = np.asarray(static_risk_aversion(u, xs))
        sdir = _direction(static)
    except CapabilityError:
        static, sdir = None, "undefined"
    dyn = np.array([np.atleast_1d(dynamic_risk_aversion(ps, float(t), xs)) for t in ts])
    ddirs = [_direction(row) for row in dyn]
    if sdir not in ("undefined", "mixed"):
        for t, d in zip(ts, ddirs):
            if d != sdir:
                violations.append(f"R(t={t:g}, .) is {d}, static R is {sdir}")

    ys = np.geomspace(0.05, 5.0, 41) if ys is None else np.asarray(ys, dtype=float)
    du = conjugate(u)
    h = -ys * du.argmax(ys) - du(ys)
    target = _sign(np.diff(h, 2), 1e-14 * max(1.0, float(np.max(np.abs(h)))))
    wshape = []
    for t in ts:
        w = np.asarray(w_surface(ps.dual, float(t), ys))
        s = _sign(np.diff(w, 2), 1e-14 * max(1.0, float(np.max(np.abs(w)))))
        wshape.append(s)
        if target != "mixed" and s != target:
            violations.append(f"w(t={t:g}, .) is {s}, y U~' - U~ is {target}")

    # ln u_x(t, x) = ln Y(t, x); compare with ln U'(x) where U is smooth
    logm = []
    try:
        r, l = u.slopes(xs)
        if np.any(r != l):
            raise CapabilityError("kink")
        base = _sign(np.diff(np.log(r), 2), 1e-13)
    except CapabilityError:
        base = "mixed"
    for t in ts:
        ly = np.log(inverse_y(ps.dual, float(t), xs, 1e-12))
        s = _sign(np.diff(ly, 2), 1e-13)
        ok = base == "mixed" or s == base
        logm.append(ok)
        if not ok:
            violations.append(f"ln u_x(t={t:g}, .) is {s}, ln U' is {base}")
    return MonotonicityReport(sdir, static, ts, xs, dyn, ddirs, wshape, target, logm, violations)

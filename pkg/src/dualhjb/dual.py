"""Dual value surface V^(t, y) = E[U~(y exp(S))], S ~ N(-tau, 2 tau).

All integrals are taken in the standardized variable z with
``S = -tau + sqrt(2 tau) z``.  Differentiating the Gaussian kernel in
``m = ln y`` gives

    V_m  = E[U~ z] / sqrt(2 tau),
    V_mm = E[U~ (z^2 - 1)] / (2 tau),

so ``V_y = V_m / y`` and ``V_yy = (V_mm - V_m) / y^2`` never touch a
derivative of U~ itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._solvers import monotone_newton
from .errors import ConfigError, DomainError, RangeError
from .market import EffectiveMarket, tau_profile, validate_parabolicity
from .utility import (
    CheckResult,
    DualUtility,
    PowerUtility,
    UtilityFunction,
    ValidationReport,
    conjugate,
)

__all__ = [
    "QuadratureConfig",
    "DualSurface",
    "hat_v",
    "hat_v_derivs",
    "hat_v_t",
    "w_surface",
    "inverse_y",
    "inverse_y_sweep",
    "limit_diagnostics",
    "dual_pde_residual",
    "dual_growth_check",
    "power_dual",
]

_ARG_MIN, _ARG_MAX = 1e-300, 1e300
_MAX_SPLITS = 16
_SCHEMES = ("kernel", "fd")


@dataclass(frozen=True)
class QuadratureConfig:
    """Composite Simpson rule on ``|z| <= half_width`` with ``nodes`` points.

    ``scheme`` selects how y-derivatives are obtained: ``"kernel"``
    differentiates the Gaussian weight, ``"fd"`` differences V^ in ln y
    (kept as a cross-check).
    """

    half_width: float = 8.0
    nodes: int = 4001
    scheme: str = "kernel"

    def __post_init__(self):
        if not self.half_width >= 6.0:
            raise ConfigError("half_width must be >= 6", "quadrature.half_width")
        if int(self.nodes) != self.nodes or self.nodes < 201 or self.nodes % 2 == 0:
            raise ConfigError("nodes must be an odd integer >= 201", "quadrature.nodes")
        if self.scheme not in _SCHEMES:
            raise ConfigError(f"scheme must be one of {_SCHEMES}", "quadrature.scheme")

    def to_dict(self) -> dict:
        return {"half_width": self.half_width, "nodes": self.nodes, "scheme": self.scheme}


def power_dual(r: float, c: float = 1.0) -> DualUtility:
    """Conjugate equal to ``c y^{-r}``, realized through the matching power utility."""
    if not r > 0 or not c > 0:
        raise DomainError("power_dual needs r > 0 and c > 0")
    p = r / (1.0 + r)
    scale = (c * p / (1.0 - p)) ** (1.0 - p) / p
    return conjugate(PowerUtility(p, scale))


@dataclass(frozen=True, eq=False)
class DualSurface:
    dual_utility: DualUtility
    market: EffectiveMarket
    quad: QuadratureConfig = QuadratureConfig()

    def __post_init__(self):
        rep = validate_parabolicity(self.market)
        if not rep.passed:
            raise DomainError(f"market fails parabolicity: {rep.describe()}")

    @classmethod
    def from_utility(cls, u: UtilityFunction, em: EffectiveMarket, quad: QuadratureConfig | None = None):
        return cls(conjugate(u), em, quad or QuadratureConfig())

    @property
    def T(self) -> float:
        return self.market.T

    def tau(self, t: float) -> float:
        return tau_profile(self.market, t)

    def theta_hat_norm2(self, t: float) -> float:
        return self.market.theta_hat_norm2(t)

    def with_quad(self, quad: QuadratureConfig) -> "DualSurface":
        return DualSurface(self.dual_utility, self.market, quad)


# ---------------------------------------------------------------- quadrature


def _simpson_unit(n_int: int):
    u = np.linspace(0.0, 1.0, n_int + 1)
    # end nodes sit just inside the segment so jumps at cuts use one-sided limits
    u[0], u[-1] = 1e-12, 1.0 - 1e-12
    w = np.ones(n_int + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return u, w / (3.0 * n_int)


def _cuts(du: DualUtility) -> np.ndarray:
    bps = np.array(sorted({b for b in du.breakpoints if 0.0 < b < math.inf}), dtype=float)
    if bps.size > _MAX_SPLITS:
        # too many kinks to split individually; keep the support edge only
        s = du.support_bound
        bps = np.array([s]) if math.isfinite(s) else np.zeros(0)
    return bps


def _moments(ds: DualSurface, tau: float, y: np.ndarray, quad: QuadratureConfig, fn=None):
    """Return ``(E[f], E[f z], E[f (z^2-1)])`` for f = U~(y e^S), one row per y.

    ``fn`` replaces U~ with another function of the argument (used by the
    direct route for w).
    """
    du = ds.dual_utility
    fn = fn or du
    y = np.asarray(y, dtype=float).reshape(-1)
    s = math.sqrt(2.0 * tau)
    Q = quad.half_width
    lo = np.full(y.shape, -Q - du.growth_exponent * s)
    hi = np.full(y.shape, Q)
    sup = du.support_bound
    if math.isfinite(sup):
        z_sup = (np.log(sup / y) + tau) / s
        lo = np.minimum(lo, z_sup - Q)
        hi = np.minimum(hi, z_sup)
        # edge deep in the left tail: keep the e^{-Q^2/2} truncation relative
        # to the weight at the edge instead of spending nodes on a full window
        tail = z_sup - (np.sqrt(z_sup * z_sup + Q * Q) + z_sup) - du.growth_exponent * s
        lo = np.where(z_sup < 0.0, np.maximum(lo, tail), lo)
    cuts = _cuts(du)
    zc = (np.log(cuts[None, :] / y[:, None]) + tau) / s if cuts.size else np.zeros((y.size, 0))
    inside = (zc > lo[:, None]) & (zc < hi[:, None])
    out = np.empty((3, y.size))
    # rows sharing the same interior cuts share one segment layout
    patterns, groups = np.unique(inside, axis=0, return_inverse=True)
    for g, pat in enumerate(patterns):
        rows = np.flatnonzero(groups.reshape(-1) == g)
        edges = np.concatenate([lo[rows, None], np.sort(zc[rows][:, pat], axis=1), hi[rows, None]], axis=1)
        out[:, rows] = _simpson_moments(fn, y[rows], tau, s, edges, quad.nodes)
    return out[0], out[1], out[2]


def _simpson_moments(fn, y, tau, s, edges, nodes):
    k = edges.shape[1] - 1
    n_int = max(2, ((nodes - 1) // k) // 2 * 2)
    u, w = _simpson_unit(n_int)
    a = edges[:, :-1, None]
    length = (edges[:, 1:] - edges[:, :-1])[:, :, None]
    z = a + length * u
    wz = length * w
    arg = np.clip(y[:, None, None] * np.exp(-tau + s * z), _ARG_MIN, _ARG_MAX)
    f = fn(arg) * np.exp(-0.5 * z * z) * wz / math.sqrt(2.0 * math.pi)
    return f.sum(axis=(1, 2)), (f * z).sum(axis=(1, 2)), (f * (z * z - 1.0)).sum(axis=(1, 2))


def _check_t(ds: DualSurface, t: float, allow_T: bool) -> float:
    if not 0.0 <= t <= ds.T:
        raise DomainError(f"t={t} outside [0, {ds.T}]")
    if t >= ds.T and not allow_T:
        raise DomainError("derivatives of V^ require t < T")
    return ds.tau(t)


def _check_y(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0)):
        raise DomainError("y must be positive")
    return y


def _shape(out, y):
    return float(out[0]) if np.ndim(y) == 0 else out.reshape(np.shape(y))


def hat_v(ds: DualSurface, t: float, y):
    """V^(t, y); at ``t = T`` the terminal value U~(y)."""
    y = _check_y(y)
    tau = _check_t(ds, t, allow_T=True)
    if tau == 0.0:
        return _shape(np.atleast_1d(ds.dual_utility(y)), y)
    e0, _, _ = _moments(ds, tau, y, ds.quad)
    return _shape(e0, y)


def _m_derivs(ds: DualSurface, tau: float, y: np.ndarray):
    """(V, V_m, V_mm) at one tau for the flat array y."""
    if ds.quad.scheme == "fd":
        h = 1e-3
        yy = np.concatenate([y * math.exp(-h), y, y * math.exp(h)])
        v = _moments(ds, tau, yy, ds.quad)[0].reshape(3, -1)
        vm = (v[2] - v[0]) / (2.0 * h)
        vmm = (v[2] - 2.0 * v[1] + v[0]) / (h * h)
        return v[1], vm, vmm
    e0, e1, e2 = _moments(ds, tau, y, ds.quad)
    return e0, e1 / math.sqrt(2.0 * tau), e2 / (2.0 * tau)


def hat_v_derivs(ds: DualSurface, t: float, y):
    """Return ``(V^, V^_y, V^_yy)`` at ``t < T``."""
    y = _check_y(y)
    tau = _check_t(ds, t, allow_T=False)
    yf = np.atleast_1d(y).reshape(-1)
    v, vm, vmm = _m_derivs(ds, tau, yf)
    vy = vm / yf
    vyy = (vmm - vm) / (yf * yf)
    return _shape(v, y), _shape(vy, y), _shape(vyy, y)


def hat_v_t(ds: DualSurface, t: float, y):
    """V^_t from the linear dual equation: ``-1/2 |theta_hat(t)|^2 y^2 V^_yy``."""
    _, _, vyy = hat_v_derivs(ds, t, y)
    return -0.5 * ds.theta_hat_norm2(t) * np.asarray(y) ** 2 * vyy


def w_surface(ds: DualSurface, t: float, y, route: str = "derivs"):
    """``w = y V^_y - V^``.

    ``route="derivs"`` uses the kernel derivatives; ``route="direct"``
    integrates ``eta U~'(eta) - U~(eta)`` against the same kernel.
    """
    y = _check_y(y)
    tau = _check_t(ds, t, allow_T=False)
    yf = np.atleast_1d(y).reshape(-1)
    if route == "derivs":
        v, vm, _ = _m_derivs(ds, tau, yf)
        return _shape(vm - v, y)
    if route == "direct":
        du = ds.dual_utility

        def g(eta):
            val, xs = du._eval(eta)
            return -eta * xs - val

        return _shape(_moments(ds, tau, yf, ds.quad, fn=g)[0], y)
    raise DomainError(f"unknown route {route!r}")


# ------------------------------------------------------------------ inverse


def inverse_y(ds: DualSurface, t: float, x, tol: float = 1e-10, y0=None):
    """The y solving ``-V^_y(t, y) = x`` (vectorized over x).

    Newton on ``ln(-V^_y) - ln x`` as a function of ln y, safeguarded by a
    bracket.  ``y0`` is an optional warm start, scalar or shaped like x.
    """
    xa = np.asarray(x, dtype=float)
    if np.any(~(xa > 0)):
        raise DomainError("inverse_y requires x > 0")
    tau = _check_t(ds, t, allow_T=False)
    xf = xa.reshape(-1)
    lx = np.log(xf)
    log_tol = 0.25 * tol * np.maximum(1.0, xf) / xf

    def F(z, idx):
        _, vm, vmm = _m_derivs(ds, tau, np.exp(z))
        neg = vm < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(neg, np.log(np.where(neg, -vm, 1.0)) - z - lx[idx], -np.inf)
            dg = (vmm - vm) / vm
        return g, dg

    if y0 is None:
        z0 = np.zeros(xf.size)
    else:
        z0 = np.log(np.broadcast_to(np.asarray(y0, dtype=float), xa.shape)).reshape(-1)
    try:
        z = monotone_newton(F, z0, log_tol, step=1.0, z_min=-690.0, z_max=690.0)
    except RangeError as e:
        raise RangeError(f"inverse_y(t={t}): {e}") from None
    y = np.exp(z)
    return float(y[0]) if xa.ndim == 0 else y.reshape(xa.shape)


def inverse_y_sweep(ds: DualSurface, t: float, xs, tol: float = 1e-10) -> np.ndarray:
    """Y(t, x) along a monotone sequence of x, warm-starting each solve from the previous one."""
    xs = np.asarray(xs, dtype=float)
    out = np.empty(xs.shape)
    y_prev = None
    for i in np.ndindex(xs.shape):
        y_prev = inverse_y(ds, t, float(xs[i]), tol, y_prev)
        out[i] = y_prev
    return out


# -------------------------------------------------------------- diagnostics


def limit_diagnostics(
    ds: DualSurface, t: float, tail_rel: float = 1e-2, blowup_rel: float = 1e2
) -> ValidationReport:
    """Boundary trends of V^ and V^_y at ``y -> 0`` and ``y -> infinity``.

    Tail and blow-up thresholds are relative to the values at ``y = 1``.
    """
    if not t < ds.T:
        raise DomainError("limit diagnostics require t < T")
    ys = np.array([1e-6, 1e-3, 1.0, 1e6])
    v, vy, _ = hat_v_derivs(ds, t, ys)
    checks = {
        "blowup_at_zero": CheckResult(bool(v[0] > v[1] > v[2]), None, f"V = {v[:3].tolist()}"),
        "vanish_at_infinity": CheckResult(
            bool(v[3] < tail_rel * v[2]), None, f"V(1e6) = {v[3]:.3g}, V(1) = {v[2]:.3g}"
        ),
        "slope_blowup_at_zero": CheckResult(
            bool(vy[0] < -blowup_rel * abs(vy[2])), None, f"V_y(1e-6) = {vy[0]:.3g}"
        ),
        "slope_vanish_at_infinity": CheckResult(
            bool(abs(vy[3]) < tail_rel * abs(vy[2])), None, f"V_y(1e6) = {vy[3]:.3g}"
        ),
    }
    return ValidationReport(checks)


def _fd_t(f, t: float, h: float, ds: DualSurface):
    """Central difference in t that stays inside the coefficient interval of t."""
    grid = ds.market.params.grid
    k = ds.market.params.interval(t)
    a, b = grid[k], grid[k + 1]
    lo, hi = max(a, t - h), min(b, t + h)
    if hi >= ds.T:
        hi = t
    if lo == hi:
        raise DomainError("no room for a t-difference")
    if hi - t == t - lo:
        return (f(hi) - f(lo)) / (hi - lo)
    # one-sided second order
    if hi == t:
        return (3 * f(t) - 4 * f(t - h) + f(t - 2 * h)) / (2 * h)
    return (-3 * f(t) + 4 * f(t + h) - f(t + 2 * h)) / (2 * h)


def dual_pde_residual(ds: DualSurface, t: float, y, h: float | None = None):
    """Scaled residual of ``V_t + 1/2 |theta_hat|^2 y^2 V_yy`` with V_t by differences.

    Returns ``|r| / (|V_t| + |diffusion term|)``.
    """
    y = _check_y(y)
    tau = _check_t(ds, t, allow_T=False)
    h = h if h is not None else 1e-3 * max(ds.T - t, 1e-6)
    vt = _fd_t(lambda s: np.atleast_1d(hat_v(ds, s, y)), t, h, ds)
    _, _, vyy = hat_v_derivs(ds, t, y)
    diff = 0.5 * ds.theta_hat_norm2(t) * np.atleast_1d(np.asarray(y) ** 2 * vyy)
    scale = np.abs(vt) + np.abs(diff)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(scale > 0, np.abs(vt + diff) / scale, 0.0)
    return _shape(r, y)


def dual_growth_check(ds: DualSurface, ts, ys) -> CheckResult:
    """``V^(t, y) <= K (1 + y^{p/(p-1)})`` with the constant built from the clock."""
    p = ds.dual_utility.source.growth.p
    K = ds.dual_utility.dual_growth * math.exp(p * ds.tau(0.0) / (p - 1.0) ** 2)
    ys = np.asarray(ys, dtype=float)
    worst = -math.inf
    for t in ts:
        v = np.atleast_1d(hat_v(ds, float(t), ys))
        ratio = v / (K * (1.0 + ys ** (p / (p - 1.0))))
        worst = max(worst, float(ratio.max()))
    return CheckResult(worst <= 1.0 + 1e-12, None, f"K = {K:.6g}, max V/bound = {worst:.6g}")

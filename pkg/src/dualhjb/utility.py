"""Concave utilities on [0, inf), their subgradients and convex conjugates.

Every family is vectorized over numpy arrays and immutable after
construction.  The conjugate

    U~(y) = sup_{x >= 0} (U(x) - x y)

is available in closed form for `PowerUtility` and `PiecewiseUtility`; the
other families go through `eval_conjugate_generic`, a bracketed bisection on
the subgradient condition y in dU(x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CapabilityError, ConfigError, DomainError

__all__ = [
    "GrowthCertificate",
    "SubgradientInterval",
    "UtilityFunction",
    "PowerUtility",
    "Branch",
    "PiecewiseUtility",
    "TabulatedUtility",
    "PowerSumUtility",
    "HingedUtility",
    "DualUtility",
    "CheckResult",
    "ValidationReport",
    "eval_utility",
    "subdiff_utility",
    "conjugate",
    "eval_conjugate_generic",
    "dual_growth_constant",
    "validate_assumption1",
    "default_validation_grid",
    "utility_from_dict",
    "kinked_utility",
]


def default_validation_grid() -> np.ndarray:
    return np.logspace(-6.0, 6.0, 512)


def _check_nonneg(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DomainError("utility is defined on x >= 0 only")
    return x


def _check_exponent(p: float, what: str = "p") -> float:
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ConfigError(f"{what} must lie in (0,1), got {p}")
    return p


@dataclass(frozen=True)
class GrowthCertificate:
    """Constants (L, p) with 0 <= U(x) <= L (1 + x**p)."""

    L: float
    p: float

    def __post_init__(self):
        if not self.L > 0:
            raise ConfigError(f"growth constant L must be positive, got {self.L}")
        _check_exponent(self.p)

    def bound(self, x):
        return self.L * (1.0 + np.asarray(x, dtype=float) ** self.p)


@dataclass(frozen=True)
class SubgradientInterval:
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("empty subgradient interval")

    def contains(self, y: float, tol: float = 0.0) -> bool:
        return self.lower - tol <= y <= self.upper + tol

    @property
    def is_point(self) -> bool:
        return self.lower == self.upper


class UtilityFunction:
    """Base class for the utility families.

    Subclasses implement ``_value``, ``_slopes`` (right and left derivative),
    ``slope_at_zero`` and ``to_dict``.
    """

    family = "abstract"
    smooth = False

    growth: GrowthCertificate

    def __call__(self, x):
        x = _check_nonneg(x)
        return self._value(x)

    def slopes(self, x):
        """Return ``(right, left)`` one-sided derivatives at x > 0."""
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise DomainError("one-sided slopes require x > 0")
        return self._slopes(x)

    def slope_at_zero(self) -> float:
        raise NotImplementedError

    def second_derivative(self, x):
        raise CapabilityError(f"{self.family} utility is not twice differentiable")

    @property
    def tail_unbounded(self) -> bool:
        return True

    def dual_breakpoints(self) -> tuple[float, ...]:
        """Points y where U~ fails to be twice differentiable."""
        return ()

    def conjugate_closed_form(self, y: np.ndarray):
        """Return ``(value, argmax)`` arrays, or None when no closed form exists."""
        return None

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _value(self, x):
        raise NotImplementedError

    def _slopes(self, x):
        raise NotImplementedError


class PowerUtility(UtilityFunction):
    """U(x) = scale * x**p with 0 < p < 1."""

    family = "power"
    smooth = True

    def __init__(self, p: float, scale: float = 1.0, growth: GrowthCertificate | None = None):
        self.p = _check_exponent(p)
        if not scale > 0:
            raise ConfigError(f"scale must be positive, got {scale}")
        self.scale = float(scale)
        self.growth = growth or GrowthCertificate(self.scale, self.p)

    def _value(self, x):
        return self.scale * x**self.p

    def _slopes(self, x):
        d = self.scale * self.p * x ** (self.p - 1.0)
        return d, d

    def slope_at_zero(self) -> float:
        return math.inf

    def second_derivative(self, x):
        x = np.asarray(x, dtype=float)
        return self.scale * self.p * (self.p - 1.0) * x ** (self.p - 2.0)

    def conjugate_closed_form(self, y):
        y = np.asarray(y, dtype=float)
        q = self.p
        # x* y = (s q)^{1/(1-q)} y^{-q/(1-q)}; evaluated in logs to survive extreme y
        log_xy = (math.log(self.scale * q) - q * np.log(y)) / (1.0 - q)
        with np.errstate(over="ignore"):
            xy = np.exp(log_xy)
            value = xy * (1.0 / q - 1.0)
            x_star = xy / y
        return value, x_star

    def to_dict(self) -> dict:
        return {"family": "power", "p": self.p, "scale": self.scale}

    def __repr__(self):
        return f"PowerUtility(p={self.p}, scale={self.scale})"


@dataclass(frozen=True)
class Branch:
    """One concave branch ``coef * x**exponent + offset``; exponent 1 is linear."""

    coef: float
    exponent: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.exponent <= 1.0:
            raise ConfigError(f"branch exponent must lie in (0,1], got {self.exponent}")
        if self.coef < 0:
            raise ConfigError(f"branch coefficient must be nonnegative, got {self.coef}")

    @property
    def linear(self) -> bool:
        return self.exponent == 1.0

    def value(self, x):
        return self.coef * x**self.exponent + self.offset

    def slope(self, x):
        if self.linear:
            return np.full_like(np.asarray(x, dtype=float), self.coef)
        with np.errstate(divide="ignore"):
            return self.coef * self.exponent * np.asarray(x, dtype=float) ** (self.exponent - 1.0)

    def affine(self, scale: float, shift: float) -> "Branch":
        return Branch(self.coef * scale, self.exponent, self.offset * scale + shift)

    def to_dict(self) -> dict:
        if self.linear:
            return {"kind": "linear", "coef": self.coef, "offset": self.offset}
        return {"kind": "power", "coef": self.coef, "exponent": self.exponent, "offset": self.offset}


class PiecewiseUtility(UtilityFunction):
    """Concave utility assembled from branches joined at crossover points.

    Branch ``i`` is active on ``[crossovers[i-1], crossovers[i]]``.  Values
    must agree at every crossover; the concavity of the assembled function is
    a property checked by `validate_assumption1`.
    """

    family = "piecewise"

    def __init__(
        self,
        branches: Sequence[Branch],
        crossovers: Sequence[float] = (),
        growth: GrowthCertificate | None = None,
        rtol: float = 1e-9,
    ):
        self.branches = tuple(branches)
        self.crossovers = tuple(float(c) for c in crossovers)
        if not self.branches:
            raise ConfigError("at least one branch is required")
        if len(self.crossovers) != len(self.branches) - 1:
            raise ConfigError("need exactly one crossover between consecutive branches")
        if any(c <= 0 for c in self.crossovers) or any(
            b <= a for a, b in zip(self.crossovers, self.crossovers[1:])
        ):
            raise ConfigError("crossovers must be positive and strictly increasing")
        if self.branches[0].offset != 0.0:
            raise ConfigError("first branch must vanish at 0 (U(0) = 0)")
        for i, c in enumerate(self.crossovers):
            left = float(self.branches[i].value(c))
            right = float(self.branches[i + 1].value(c))
            if abs(left - right) > rtol * max(1.0, abs(left)):
                raise ConfigError(
                    f"branches {i} and {i + 1} disagree at crossover {c}: {left} vs {right}"
                )
        self._coef = np.array([b.coef for b in self.branches])
        self._exp = np.array([b.exponent for b in self.branches])
        self._off = np.array([b.offset for b in self.branches])
        self._lo = np.array((0.0,) + self.crossovers)
        self._hi = np.array(self.crossovers + (math.inf,))
        self.growth = growth or self._default_growth()
        self._pieces = self._dual_pieces()

    @property
    def smooth(self) -> bool:
        return len(self.branches) == 1

    def _default_growth(self) -> GrowthCertificate:
        tail = self.branches[-1]
        p = tail.exponent if tail.exponent < 1.0 else 0.5
        L = 0.0
        for b, hi in zip(self.branches, self._hi):
            # x^q <= 1 + x^p whenever q <= p; bounded segments use their right end
            if b.exponent <= p or not math.isfinite(hi):
                L = max(L, b.coef + max(b.offset, 0.0))
            else:
                L = max(L, b.coef * hi**b.exponent + max(b.offset, 0.0))
        return GrowthCertificate(float(max(L, 1e-300)), float(p))

    def _index(self, x, side="right"):
        return np.searchsorted(np.asarray(self.crossovers), x, side=side)

    def _value(self, x):
        i = self._index(x)
        with np.errstate(invalid="ignore"):
            return self._coef[i] * x ** self._exp[i] + self._off[i]

    def _branch_slope(self, i, x):
        q = self._exp[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(q == 1.0, self._coef[i], self._coef[i] * q * x ** (q - 1.0))

    def _slopes(self, x):
        return self._branch_slope(self._index(x, "right"), x), self._branch_slope(
            self._index(x, "left"), x
        )

    def slope_at_zero(self) -> float:
        b = self.branches[0]
        return b.coef if b.linear else (math.inf if b.coef > 0 else 0.0)

    def second_derivative(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(np.isin(x, self.crossovers)):
            raise CapabilityError("utility has a kink at a crossover point")
        i = self._index(x)
        q = self._exp[i]
        return self._coef[i] * q * (q - 1.0) * x ** (q - 2.0)

    @property
    def tail_unbounded(self) -> bool:
        return self.branches[-1].coef > 0

    def dual_breakpoints(self) -> tuple[float, ...]:
        pts = set()
        for b in self.branches:
            if b.linear and b.coef > 0:
                pts.add(b.coef)
        for i, c in enumerate(self.crossovers):
            pts.add(float(self.branches[i].slope(c)))
            pts.add(float(self.branches[i + 1].slope(c)))
        return tuple(sorted(p for p in pts if 0 < p < math.inf))

    def _dual_pieces(self):
        """Tabulate U~ as a function of y, or None when U is not concave.

        Returns ``(y_lo, kind, X, V, A, E, C, G)`` sorted by ascending ``y_lo``.
        On a vertex piece (kind 0) the maximizer is the fixed point X and
        ``U~ = V - X y``; on a power piece (kind 1) ``x* = (A / y)^E`` and
        ``U~ = C + G x* y`` with ``G = 1/q - 1``.
        """
        if np.any(self._coef < 0) or np.any(self._exp > 1.0):
            return None
        rows = []  # (y_lo, y_hi, kind, X, V, A, E, C, G)
        s0 = self.slope_at_zero()
        rows.append((s0, math.inf, 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0))
        for i, b in enumerate(self.branches):
            lo, hi = self._lo[i], self._hi[i]
            s_lo = float(b.slope(lo)) if lo > 0 else (math.inf if not b.linear else b.coef)
            s_hi = float(b.slope(hi)) if math.isfinite(hi) else (b.coef if b.linear else 0.0)
            if s_hi > s_lo * (1 + 1e-12):
                return None
            if not b.linear and s_hi < s_lo:
                q = b.exponent
                rows.append(
                    (s_hi, s_lo, 1, 0.0, 0.0, b.coef * q, 1.0 / (1.0 - q), b.offset, 1.0 / q - 1.0)
                )
            if i + 1 < len(self.branches):
                c = self.crossovers[i]
                s_next = float(self.branches[i + 1].slope(c))
                if s_next > s_hi * (1 + 1e-12):
                    return None
                rows.append((s_next, s_hi, 0, c, float(b.value(c)), 0.0, 0.0, 0.0, 0.0))
        rows.sort(key=lambda r: (r[0], -r[3]))
        cols = [np.array(c, dtype=float) for c in zip(*rows)]
        return tuple(cols[:1] + cols[2:])

    def conjugate_closed_form(self, y):
        y = np.asarray(y, dtype=float)
        if self._pieces is None:
            return self._conjugate_by_branches(y)
        y_lo, kind, X, V, A, E, C, G = self._pieces
        j = np.searchsorted(y_lo, y, side="right") - 1
        below = j < 0
        j = np.maximum(j, 0)
        vert = kind[j] == 0
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            xp = (A[j] / y) ** E[j]
            x_star = np.where(vert, X[j], xp)
            value = np.where(vert, V[j] - X[j] * y, C[j] + G[j] * xp * y)
        value = np.where(below, np.inf, value)
        x_star = np.where(below, np.inf, x_star)
        return value, x_star

    def _conjugate_by_branches(self, y):
        """Best stationary or boundary point over all branches; no concavity needed."""
        y = np.asarray(y, dtype=float)
        yy = y[..., None]
        a, q, c = self._coef, self._exp, self._off
        lo, hi = self._lo, self._hi
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            lin = q == 1.0
            qs = np.where(lin, 0.5, q)
            x_st = np.exp((np.log(a * qs) - np.log(yy)) / (1.0 - qs))
            x_pow = np.clip(x_st, lo, hi)
            x_lin = np.where(a > yy, hi, lo)
            x = np.where(lin, x_lin, x_pow)
            val = a * x**q + c - x * yy
            # interior stationary point of a power branch: a x^q = x y / q
            interior = (~lin) & (x_st > lo) & (x_st < hi)
            val_int = x_st * yy * (1.0 / qs - 1.0) + c
            val = np.where(interior, val_int, val)
            val = np.where(np.isinf(x) & (a > yy), np.inf, val)
            val = np.where(a == 0, c - lo * yy, val)
        k = np.argmax(val, axis=-1)
        value = np.take_along_axis(val, k[..., None], axis=-1)[..., 0]
        x_star = np.take_along_axis(x, k[..., None], axis=-1)[..., 0]
        return value, x_star

    def to_dict(self) -> dict:
        return {
            "family": "piecewise",
            "branches": [b.to_dict() for b in self.branches],
            "crossovers": list(self.crossovers),
        }

    def __repr__(self):
        return f"PiecewiseUtility({list(self.branches)}, crossovers={list(self.crossovers)})"


def kinked_utility() -> PiecewiseUtility:
    """U(x) = min(x, sqrt(x)): linear below 1, square root above."""
    return PiecewiseUtility([Branch(1.0), Branch(1.0, 0.5)], [1.0])


class TabulatedUtility(UtilityFunction):
    """Piecewise-linear interpolant through ``(x, u)`` with a power tail.

    Beyond the last knot ``U(x) = u_n + A (x**q - x_n**q)``, with ``A`` chosen
    so the slope is continuous at ``x_n``.  Knots must start at (0, 0).
    """

    family = "tabulated"

    def __init__(
        self,
        x: Sequence[float],
        u: Sequence[float],
        tail_exponent: float = 0.5,
        growth: GrowthCertificate | None = None,
    ):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.ndim != 1 or x.shape != u.shape or x.size < 2:
            raise ConfigError("tabulated utility needs matching 1-d x and u with >= 2 knots")
        if x[0] != 0.0 or u[0] != 0.0:
            raise ConfigError("first knot must be (0, 0)")
        if np.any(np.diff(x) <= 0):
            raise ConfigError("knots must be strictly increasing")
        self.x, self.u = x, u
        self.q = _check_exponent(tail_exponent, "tail_exponent")
        self._s = np.diff(u) / np.diff(x)
        xn = x[-1]
        self._A = self._s[-1] / (self.q * xn ** (self.q - 1.0))
        self.growth = growth or self._default_growth()

    def _default_growth(self) -> GrowthCertificate:
        p = self.q
        seg = self.u[1:] / (1.0 + self.x[:-1] ** p)
        tail = max(self.u[-1] - self._A * self.x[-1] ** p, 0.0) + self._A
        return GrowthCertificate(max(float(np.max(seg, initial=0.0)), tail, 1e-300), p)

    def _value(self, x):
        xn, un = self.x[-1], self.u[-1]
        inner = np.interp(x, self.x, self.u)
        with np.errstate(invalid="ignore"):
            tail = un + self._A * (x**self.q - xn**self.q)
        return np.where(x > xn, tail, inner)

    def _slope_on(self, idx, x):
        # idx = segment index; len(s) means the tail
        s = np.concatenate([self._s, [np.nan]])[np.minimum(idx, len(self._s))]
        with np.errstate(invalid="ignore"):
            tail = self._A * self.q * x ** (self.q - 1.0)
        return np.where(idx >= len(self._s), tail, s)

    def _slopes(self, x):
        right = np.searchsorted(self.x, x, side="right") - 1
        left = np.searchsorted(self.x, x, side="left") - 1
        return self._slope_on(right, x), self._slope_on(left, x)

    def slope_at_zero(self) -> float:
        return float(self._s[0])

    @property
    def tail_unbounded(self) -> bool:
        return self._A > 0

    def dual_breakpoints(self) -> tuple[float, ...]:
        return tuple(sorted(float(s) for s in set(self._s) if s > 0))

    def to_dict(self) -> dict:
        return {
            "family": "tabulated",
            "x": self.x.tolist(),
            "u": self.u.tolist(),
            "tail_exponent": self.q,
        }


class PowerSumUtility(UtilityFunction):
    """U(x) = sum_i c_i x**p_i with every p_i in (0,1)."""

    family = "power_sum"
    smooth = True

    def __init__(self, terms: Sequence[tuple[float, float]], growth: GrowthCertificate | None = None):
        if not terms:
            raise ConfigError("power_sum needs at least one term")
        self.coefs = np.array([float(c) for c, _ in terms])
        self.exps = np.array([_check_exponent(p) for _, p in terms])
        if np.any(self.coefs <= 0):
            raise ConfigError("power_sum coefficients must be positive")
        self.growth = growth or GrowthCertificate(float(self.coefs.sum()), float(self.exps.max()))

    def _value(self, x):
        return np.sum(self.coefs * np.asarray(x)[..., None] ** self.exps, axis=-1)

    def _slopes(self, x):
        d = np.sum(self.coefs * self.exps * x[..., None] ** (self.exps - 1.0), axis=-1)
        return d, d

    def slope_at_zero(self) -> float:
        return math.inf

    def second_derivative(self, x):
        x = np.asarray(x, dtype=float)
        c, p = self.coefs, self.exps
        return np.sum(c * p * (p - 1.0) * x[..., None] ** (p - 2.0), axis=-1)

    def to_dict(self) -> dict:
        return {"family": "power_sum", "terms": [[float(c), float(p)] for c, p in zip(self.coefs, self.exps)]}


class HingedUtility(UtilityFunction):
    """``min((1 + k) U(x), U(x) + k c)`` for a base utility U, k >= 0 and c > 0.

    This is the shape of the CVaR-modified utility when the base family has
    no branch representation.
    """

    family = "hinged"

    def __init__(self, base: UtilityFunction, k: float, level: float):
        if k < 0 or level <= 0:
            raise ConfigError("hinged utility needs k >= 0 and level > 0")
        self.base, self.k, self.level = base, float(k), float(level)
        g = base.growth
        self.growth = GrowthCertificate(g.L + self.k * self.level, g.p)

    def _value(self, x):
        u = self.base._value(x)
        return np.minimum((1.0 + self.k) * u, u + self.k * self.level)

    def _slopes(self, x):
        u = self.base._value(x)
        r, l = self.base._slopes(x)
        f = 1.0 + self.k
        right = np.where(u < self.level, f * r, r)
        left = np.where(u <= self.level, f * l, l)
        return right, left

    def slope_at_zero(self) -> float:
        return (1.0 + self.k) * self.base.slope_at_zero()

    def _crossing(self) -> float:
        lo, hi = 0.0, 1.0
        while self.base._value(np.array(hi)) < self.level:
            lo, hi = hi, hi * 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.base._value(np.array(mid)) < self.level:
                lo = mid
            else:
                hi = mid
        return hi

    def dual_breakpoints(self) -> tuple[float, ...]:
        xc = self._crossing()
        r, l = self.base._slopes(np.array([xc]))
        pts = {float(r[0]), float(l[0]) * (1.0 + self.k)}
        for b in self.base.dual_breakpoints():
            pts.update((b, b * (1.0 + self.k)))
        return tuple(sorted(p for p in pts if 0 < p < math.inf))

    @property
    def tail_unbounded(self) -> bool:
        return self.base.tail_unbounded

    def to_dict(self) -> dict:
        return {"family": "hinged", "base": self.base.to_dict(), "k": self.k, "level": self.level}


def eval_utility(u: UtilityFunction, x):
    """U(x); raises `DomainError` for negative x."""
    out = u(x)
    return float(out) if np.ndim(out) == 0 else out


def subdiff_utility(u: UtilityFunction, x: float) -> SubgradientInterval:
    """Superdifferential ``[U'(x+), U'(x-)]`` of the concave utility at x > 0."""
    if not x > 0:
        raise DomainError("subdifferential requires x > 0")
    r, l = u.slopes(np.array([float(x)]))
    return SubgradientInterval(float(r[0]), float(l[0]))


def _argmax_generic(u: UtilityFunction, y: np.ndarray, tol: float) -> np.ndarray:
    """Smallest maximizer x*(y) = inf{x : U'(x+) <= y}, vectorized over y.

    Bisection runs on z = ln x.  The bracket [-w, w] is doubled until the
    right-slope predicate changes sign or the float range is exhausted.
    """
    y = np.asarray(y, dtype=float)
    x = np.zeros_like(y)
    act = y < u.slope_at_zero()
    if not act.any():
        return x
    ya = y[act]

    def flat(z):  # True once U'(e^z +) <= y
        return u._slopes(np.exp(z))[0] <= ya

    lo = np.full_like(ya, -1.0)
    hi = np.full_like(ya, 1.0)
    for _ in range(10):
        lo_bad = flat(lo) & (lo > -744.0)
        hi_bad = ~flat(hi) & (hi < 709.0)
        if not (lo_bad.any() or hi_bad.any()):
            break
        lo = np.where(lo_bad, np.maximum(2.0 * lo, -744.0), lo)
        hi = np.where(hi_bad, np.minimum(2.0 * hi, 709.0), hi)
    at_zero = flat(lo)
    for _ in range(80):
        width = hi - lo
        if np.all(width <= 1e-15 * np.maximum(1.0, np.abs(hi))):
            break
        # value error is at most (U'(x_lo+) - y) * (x_hi - x_lo)
        if tol > 0:
            xl, xh = np.exp(lo), np.exp(hi)
            gap = (u._slopes(xl)[0] - ya) * (xh - xl)
            if np.all(gap <= tol * 1e-3):
                break
        mid = 0.5 * (lo + hi)
        f = flat(mid)
        hi = np.where(f, mid, hi)
        lo = np.where(f, lo, mid)
    x[act] = np.where(at_zero, 0.0, np.exp(hi))
    return x


def eval_conjugate_generic(u: UtilityFunction, y, tol: float = 1e-12):
    """sup_x (U(x) - x y) by bisection on the subgradient condition.

    Falls back to x = 0 (value 0) when y >= U'(0+).  Raises `DomainError`
    for y <= 0, where the conjugate is +inf.
    """
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr <= 0):
        raise DomainError("conjugate requires y > 0 (U~(0) = U(inf) = inf)")
    xs = _argmax_generic(u, y_arr.ravel(), tol).reshape(y_arr.shape)
    val = u._value(xs) - xs * y_arr
    val = np.maximum(val, 0.0)
    return float(val) if np.ndim(val) == 0 else val


def dual_growth_constant(L: float, p: float) -> float:
    """L^ = max{L, (L p)^{1/(1-p)} (1/p - 1)}, so U~(y) <= L^ (1 + y^{p/(p-1)})."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"p must lie in (0,1), got {p}")
    if not L > 0:
        raise DomainError(f"L must be positive, got {L}")
    return max(L, (L * p) ** (1.0 / (1.0 - p)) * (1.0 / p - 1.0))


@dataclass(frozen=True)
class DualUtility:
    """The conjugate U~ of a utility, with its growth constant L^."""

    source: UtilityFunction
    dual_growth: float
    closed_form: str | None = None
    tol: float = 1e-12

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0):
            raise DomainError("U~ is defined for y > 0")
        return self._eval(y)[0]

    def _eval(self, y):
        cf = self.source.conjugate_closed_form(y) if self.closed_form else None
        if cf is not None:
            return cf
        xs = _argmax_generic(self.source, y.ravel(), self.tol).reshape(y.shape)
        with np.errstate(invalid="ignore"):
            val = np.maximum(self.source._value(xs) - xs * y, 0.0)
        return val, xs

    def derivative(self, y):
        """U~'(y) = -x*(y), defined except at countably many points."""
        y = np.asarray(y, dtype=float)
        return -self._eval(y)[1]

    def argmax(self, y):
        return self._eval(np.asarray(y, dtype=float))[1]

    @property
    def support_bound(self) -> float:
        """U~(y) = 0 for every y >= this value (U'(0+))."""
        return self.source.slope_at_zero()

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return self.source.dual_breakpoints()

    @property
    def growth_exponent(self) -> float:
        """r = p / (1 - p): U~ grows no faster than y**-r at 0."""
        p = self.source.growth.p
        return p / (1.0 - p)

    def growth_bound(self, y):
        p = self.source.growth.p
        return self.dual_growth * (1.0 + np.asarray(y, dtype=float) ** (p / (p - 1.0)))


def conjugate(u: UtilityFunction) -> DualUtility:
    """Conjugate transform; closed form when the family admits one."""
    g = u.growth
    has_cf = u.conjugate_closed_form(np.array([1.0])) is not None
    desc = None
    if has_cf:
        desc = f"{u.family}: piecewise stationary-point formula"
    return DualUtility(u, dual_growth_constant(g.L, g.p), desc)


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    first_violation: float | None = None
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def failures(self) -> list[str]:
        return [name for name, c in self.checks.items() if not c.passed]


def validate_assumption1(
    u: UtilityFunction,
    grid=None,
    unbounded_threshold: float = 10.0,
    rtol: float = 1e-9,
) -> ValidationReport:
    """Sampled checks of the standing utility requirements.

    U(0) = 0, monotone, concave (finite-difference slopes nonnegative and
    nonincreasing), 0 <= U <= L(1 + x^p), and U unbounded.
    """
    grid = default_validation_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise DomainError("validation grid is empty")
    xs = np.unique(np.concatenate([[0.0], grid[grid > 0]]))
    vals = u(xs)
    checks = {}

    u0 = float(u(np.array(0.0)))
    checks["zero_at_origin"] = CheckResult(u0 == 0.0, None if u0 == 0.0 else 0.0, f"U(0)={u0}")

    slopes = np.diff(vals) / np.diff(xs)
    scale = np.maximum(np.abs(slopes), 1e-300)
    bad = np.nonzero(slopes < -rtol * scale)[0]
    checks["nondecreasing"] = CheckResult(
        bad.size == 0, float(xs[bad[0] + 1]) if bad.size else None, "finite-difference slopes >= 0"
    )

    inc = slopes[1:] - slopes[:-1]
    bad = np.nonzero(inc > rtol * np.maximum(np.abs(slopes[:-1]), np.abs(slopes[1:])) + 1e-300)[0]
    checks["concave"] = CheckResult(
        bad.size == 0, float(xs[bad[0] + 1]) if bad.size else None, "slopes nonincreasing"
    )

    bound = u.growth.bound(xs)
    bad = np.nonzero((vals < 0) | (vals > bound * (1.0 + rtol)))[0]
    checks["growth"] = CheckResult(
        bad.size == 0,
        float(xs[bad[0]]) if bad.size else None,
        f"0 <= U <= {u.growth.L:g}(1 + x^{u.growth.p:g})",
    )

    top = float(vals[-1])
    ok = top > unbounded_threshold and u.tail_unbounded
    checks["unbounded"] = CheckResult(ok, None if ok else float(xs[-1]), f"U(x_max)={top:g}")
    return ValidationReport(checks)


def _branch_from_dict(d: dict, path: str) -> Branch:
    kind = d.get("kind")
    extra = set(d) - {"kind", "coef", "exponent", "offset"}
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", path)
    try:
        if kind == "linear":
            if "exponent" in d:
                raise ConfigError("linear branch takes no exponent", path)
            return Branch(float(d["coef"]), 1.0, float(d.get("offset", 0.0)))
        if kind == "power":
            return Branch(float(d["coef"]), float(d["exponent"]), float(d.get("offset", 0.0)))
    except KeyError as e:
        raise ConfigError(f"missing field {e.args[0]!r}", path) from None
    except ConfigError as e:
        raise ConfigError(str(e), path) from None
    raise ConfigError(f"unknown branch kind {kind!r}", path)


def utility_from_dict(d: dict, path: str = "utility") -> UtilityFunction:
    """Build a utility from its tagged config representation."""
    if not isinstance(d, dict):
        raise ConfigError("expected an object", path)
    fam = d.get("family")
    growth = None
    if "growth" in d:
        g = d["growth"]
        try:
            growth = GrowthCertificate(float(g["L"]), float(g["p"]))
        except (KeyError, TypeError):
            raise ConfigError("growth needs numeric L and p", f"{path}.growth") from None
        except ConfigError as e:
            raise ConfigError(str(e), f"{path}.growth") from None
    allowed = {
        "power": {"p", "scale"},
        "piecewise": {"branches", "crossovers"},
        "tabulated": {"x", "u", "tail_exponent"},
        "power_sum": {"terms"},
    }
    if fam not in allowed:
        raise ConfigError(f"unknown utility family {fam!r}", f"{path}.family")
    extra = set(d) - allowed[fam] - {"family", "growth"}
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", path)
    try:
        if fam == "power":
            try:
                return PowerUtility(float(d["p"]), float(d.get("scale", 1.0)), growth)
            except ConfigError as e:
                raise ConfigError(str(e), f"{path}.p") from None
        if fam == "piecewise":
            branches = [
                _branch_from_dict(b, f"{path}.branches[{i}]") for i, b in enumerate(d["branches"])
            ]
            return PiecewiseUtility(branches, d.get("crossovers", []), growth)
        if fam == "tabulated":
            return TabulatedUtility(d["x"], d["u"], float(d.get("tail_exponent", 0.5)), growth)
        return PowerSumUtility([tuple(t) for t in d["terms"]], growth)
    except KeyError as e:
        raise ConfigError(f"missing field {e.args[0]!r}", path) from None
    except ConfigError as e:
        if e.path:
            raise
        raise ConfigError(str(e), path) from None

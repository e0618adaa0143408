"""Market coefficients, trading cones and the effective price of risk.

Coefficients are piecewise constant on a time grid.  For each interval the
effective price of risk is

    theta_hat = theta + sigma^{-1} pi_hat,   theta = sigma^{-1} b,

where pi_hat minimizes ``|theta + sigma^{-1} v|^2`` over the polar cone.
The dual clock ``tau(t) = 1/2 int_t^T |theta_hat|^2 ds`` is then exact and
piecewise linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from ._solvers import nnls
from .errors import ConfigError, DomainError, SolverError

__all__ = [
    "ConeSpec",
    "MarketParams",
    "EffectiveMarket",
    "ConeQPSolution",
    "KKTResiduals",
    "ParabolicityReport",
    "polar_cone",
    "solve_cone_qp",
    "kkt_residuals",
    "optimal_direction",
    "tau_profile",
    "validate_parabolicity",
    "constant_market",
]

_KINDS = ("whole", "orthant", "generated", "halfspace")


@dataclass(frozen=True, eq=False)
class ConeSpec:
    """A closed convex cone in R^n.

    ``generated``: nonnegative combinations of the rows of ``vectors`` (an
    empty list is the zero cone).  ``halfspace``: ``{p : vectors @ p >= 0}``,
    the form polar cones of generated cones take.
    """

    kind: str
    n: int
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown cone kind {self.kind!r}")
        if self.n < 1:
            raise ConfigError("cone dimension must be >= 1")
        v = np.asarray(self.vectors, dtype=float)
        if self.kind in ("generated", "halfspace"):
            v = v.reshape(-1, self.n) if v.size else np.zeros((0, self.n))
            if np.any(np.linalg.norm(v, axis=1) == 0):
                raise ConfigError("cone generators must be nonzero")
        else:
            v = np.zeros((0, self.n))
        object.__setattr__(self, "vectors", v)

    @classmethod
    def whole(cls, n: int) -> "ConeSpec":
        return cls("whole", n)

    @classmethod
    def orthant(cls, n: int) -> "ConeSpec":
        return cls("orthant", n)

    @classmethod
    def generated(cls, generators) -> "ConeSpec":
        g = np.atleast_2d(np.asarray(generators, dtype=float))
        return cls("generated", g.shape[1], g)

    @classmethod
    def zero(cls, n: int) -> "ConeSpec":
        return cls("generated", n, np.zeros((0, n)))

    @property
    def is_zero(self) -> bool:
        return self.kind == "generated" and len(self.vectors) == 0

    def generator_matrix(self) -> np.ndarray | None:
        """Rows generating the cone, or None for half-space / whole-space forms."""
        if self.kind == "orthant":
            return np.eye(self.n)
        if self.kind == "generated":
            return self.vectors
        return None

    def contains(self, v, tol: float = 1e-10) -> bool:
        v = np.asarray(v, dtype=float)
        scale = max(1.0, float(np.linalg.norm(v)))
        if self.kind == "whole":
            return True
        if self.kind == "orthant":
            return bool(np.all(v >= -tol * scale))
        if self.kind == "halfspace":
            norms = np.linalg.norm(self.vectors, axis=1)
            return bool(np.all(self.vectors @ v >= -tol * scale * norms))
        if self.is_zero:
            return float(np.linalg.norm(v)) <= tol
        lam = nnls(self.vectors.T, v)
        return float(np.linalg.norm(self.vectors.T @ lam - v)) <= tol * scale

    def contains_rows(self, V: np.ndarray, tol: float = 1e-10) -> np.ndarray:
        """Vectorized membership for the rows of ``V`` (paths x n)."""
        V = np.asarray(V, dtype=float)
        scale = np.maximum(1.0, np.linalg.norm(V, axis=1))
        if self.kind == "whole":
            return np.ones(len(V), dtype=bool)
        if self.kind == "orthant":
            return np.all(V >= -tol * scale[:, None], axis=1)
        if self.kind == "halfspace":
            norms = np.linalg.norm(self.vectors, axis=1)
            return np.all(V @ self.vectors.T >= -tol * scale[:, None] * norms, axis=1)
        if self.is_zero:
            return np.linalg.norm(V, axis=1) <= tol
        # rows parallel to a single generator are the common case; fall back to NNLS
        out = np.empty(len(V), dtype=bool)
        uniq, inv = np.unique(np.round(V / scale[:, None], 12), axis=0, return_inverse=True)
        memb = np.array([self.contains(u, tol) for u in uniq])
        out[:] = memb[np.ravel(inv)]
        return out

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("generated", "halfspace"):
            d["generators" if self.kind == "generated" else "normals"] = self.vectors.tolist()
        return d


def polar_cone(K: ConeSpec) -> ConeSpec:
    """Positive polar cone ``{p : p'v >= 0 for all v in K}``."""
    if K.kind == "whole":
        return ConeSpec.zero(K.n)
    if K.kind == "orthant":
        return ConeSpec.orthant(K.n)
    if K.kind == "generated":
        if K.is_zero:
            return ConeSpec.whole(K.n)
        return ConeSpec("halfspace", K.n, K.vectors)
    return ConeSpec("generated", K.n, K.vectors)


class ConeQPSolution(NamedTuple):
    pi_hat: np.ndarray
    theta_hat: np.ndarray


class KKTResiduals(NamedTuple):
    complementarity: float  # |pi_hat' Df(pi_hat)|
    dual: float  # violation of Df(pi_hat) in K
    primal: float  # violation of pi_hat in K~

    def max(self) -> float:
        return max(self.complementarity, self.dual, self.primal)


def _cone_violation(K: ConeSpec, v: np.ndarray) -> float:
    """Distance-like measure of how far ``v`` is from ``K`` (0 when inside)."""
    if K.kind == "whole":
        return 0.0
    if K.kind == "orthant":
        return float(np.max(np.maximum(-v, 0.0), initial=0.0))
    if K.kind == "halfspace":
        norms = np.linalg.norm(K.vectors, axis=1)
        return float(np.max(np.maximum(-(K.vectors @ v) / norms, 0.0), initial=0.0))
    if K.is_zero:
        return float(np.linalg.norm(v))
    lam = nnls(K.vectors.T, v)
    return float(np.linalg.norm(K.vectors.T @ lam - v))


def kkt_residuals(theta, sigma, Ktilde: ConeSpec, pi_hat) -> KKTResiduals:
    """Optimality residuals of ``pi_hat`` for ``min |theta + sigma^{-1} v|^2`` over K~."""
    theta = np.asarray(theta, dtype=float)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    pi_hat = np.asarray(pi_hat, dtype=float)
    theta_hat = theta + np.linalg.solve(sigma, pi_hat)
    df = 2.0 * np.linalg.solve(sigma.T, theta_hat)
    K = polar_cone(Ktilde)
    return KKTResiduals(
        abs(float(pi_hat @ df)), _cone_violation(K, df), _cone_violation(Ktilde, pi_hat)
    )


def solve_cone_qp(theta, sigma, Ktilde: ConeSpec, tol: float = 1e-8) -> ConeQPSolution:
    """Minimize ``f(v) = |theta + sigma^{-1} v|^2`` over the cone ``Ktilde``.

    Generated cones reduce to NNLS in the generator weights.  Half-space cones
    ``{p : G p >= 0}`` are handled through the Moreau decomposition: the
    optimal ``theta_hat`` is the projection of ``theta`` onto the cone spanned
    by the rows of ``G sigma``, again an NNLS.  The KKT identities are checked
    on the way out; a residual above ``tol`` raises `SolverError`.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    n = theta.size
    if sigma.shape != (n, n):
        raise DomainError(f"sigma must be {n}x{n}")
    if Ktilde.kind == "whole":
        pi_hat = -sigma @ theta
        theta_hat = np.zeros(n)
    elif Ktilde.kind == "halfspace":
        B = (Ktilde.vectors @ sigma).T  # columns sigma' g_j
        mu = nnls(B, theta)
        theta_hat = B @ mu
        pi_hat = sigma @ (theta_hat - theta)
    else:
        Q = Ktilde.generator_matrix()
        if len(Q) == 0:
            pi_hat = np.zeros(n)
        else:
            lam = nnls(np.linalg.solve(sigma, Q.T), -theta)
            pi_hat = Q.T @ lam
        theta_hat = theta + np.linalg.solve(sigma, pi_hat)
    res = kkt_residuals(theta, sigma, Ktilde, pi_hat)
    scale = max(1.0, float(np.linalg.norm(theta)) ** 2)
    if res.max() > tol * scale:
        raise SolverError(f"cone QP certificate failed: {res}")
    return ConeQPSolution(pi_hat, theta_hat)


def _as_matrix(s, n: int, path: str) -> np.ndarray:
    a = np.asarray(s, dtype=float)
    if a.size != n * n:
        raise ConfigError(f"expected {n * n} entries for an {n}x{n} matrix", path)
    return a.reshape(n, n)


@dataclass(frozen=True, eq=False)
class MarketParams:
    """Piecewise-constant market on ``grid``; ``b[k]``, ``sigma[k]`` apply on interval k."""

    grid: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    cone: ConeSpec
    theta_floor: float = 1e-3

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0:
            raise ConfigError("time grid must start at 0 and have at least two points", "market.grid")
        if np.any(np.diff(grid) <= 0):
            raise ConfigError("time grid must be strictly increasing", "market.grid")
        m = grid.size - 1
        b = np.asarray(self.b, dtype=float)
        b = b.reshape(m, -1) if b.size else b
        if b.shape[0] != m:
            raise ConfigError(f"need one b vector per interval ({m})", "market.b")
        n = b.shape[1]
        sig = np.asarray(self.sigma, dtype=float)
        if sig.size != m * n * n:
            raise ConfigError(f"need {m} sigma matrices of size {n}x{n}", "market.sigma")
        sig = sig.reshape(m, n, n)
        for k in range(m):
            s = np.linalg.svd(sig[k], compute_uv=False)
            if s[-1] <= 1e-14 * max(s[0], 1e-300):
                raise ConfigError("singular", f"market.sigma[{k}]")
        if self.cone.n != n:
            raise ConfigError(f"cone dimension {self.cone.n} != market dimension {n}", "market.cone")
        if not self.theta_floor > 0:
            raise ConfigError("theta_floor must be positive", "market.theta_floor")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "sigma", sig)

    @property
    def n(self) -> int:
        return self.b.shape[1]

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def intervals(self) -> int:
        return self.grid.size - 1

    def condition_numbers(self) -> np.ndarray:
        return np.array([np.linalg.cond(s) for s in self.sigma])

    def interval(self, t: float) -> int:
        if not 0.0 <= t <= self.T:
            raise DomainError(f"t={t} outside [0, {self.T}]")
        return int(min(np.searchsorted(self.grid, t, side="right") - 1, self.intervals - 1))

    def theta(self, k: int) -> np.ndarray:
        return np.linalg.solve(self.sigma[k], self.b[k])

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "T": self.T,
            "grid": self.grid.tolist(),
            "b": self.b.tolist(),
            "sigma": [s.reshape(-1).tolist() for s in self.sigma],
            "cone": self.cone.to_dict(),
            "theta_floor": self.theta_floor,
        }


def constant_market(b, sigma, cone: ConeSpec | None = None, T: float = 1.0, theta_floor: float = 1e-3):
    """Market with constant coefficients on ``[0, T]``."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    n = b.size
    sigma = np.asarray(sigma, dtype=float).reshape(n, n)
    return MarketParams(
        np.array([0.0, T]), b[None, :], sigma[None], cone or ConeSpec.whole(n), theta_floor
    )


@dataclass(frozen=True, eq=False)
class EffectiveMarket:
    """Per-interval theta, pi_hat and theta_hat plus the exact dual clock."""

    params: MarketParams
    theta: np.ndarray
    pi_hat: np.ndarray
    theta_hat: np.ndarray
    polar: ConeSpec

    @classmethod
    def from_params(cls, mp: MarketParams, tol: float = 1e-8) -> "EffectiveMarket":
        Kt = polar_cone(mp.cone)
        th, ph, thh = [], [], []
        for k in range(mp.intervals):
            theta = mp.theta(k)
            sol = solve_cone_qp(theta, mp.sigma[k], Kt, tol)
            th.append(theta)
            ph.append(sol.pi_hat)
            thh.append(sol.theta_hat)
        return cls(mp, np.array(th), np.array(ph), np.array(thh), Kt)

    @property
    def T(self) -> float:
        return self.params.T

    def theta_hat_at(self, t: float) -> np.ndarray:
        return self.theta_hat[self.params.interval(t)]

    def theta_hat_norm2(self, t: float) -> float:
        v = self.theta_hat_at(t)
        return float(v @ v)

    def tau_at(self, t: float) -> float:
        return tau_profile(self, t)

    def direction(self, t: float) -> np.ndarray:
        """(sigma')^{-1} theta_hat: the optimal portfolio direction on the interval of t."""
        k = self.params.interval(t)
        return np.linalg.solve(self.params.sigma[k].T, self.theta_hat[k])


def tau_profile(em: EffectiveMarket, t: float) -> float:
    """Exact ``1/2 int_t^T |theta_hat(s)|^2 ds`` for piecewise-constant theta_hat."""
    grid = em.params.grid
    T = grid[-1]
    if not 0.0 <= t <= T:
        raise DomainError(f"t={t} outside [0, {T}]")
    rates = 0.5 * np.einsum("ki,ki->k", em.theta_hat, em.theta_hat)
    lengths = np.clip(grid[1:] - np.maximum(grid[:-1], t), 0.0, None)
    return float(rates @ lengths)


def optimal_direction(a: float, t: float, em: EffectiveMarket, mp: MarketParams | None = None):
    """Minimizer of ``g(pi) = 1/2 |pi' sigma|^2 - a pi' b`` over the trading cone.

    Returns ``(pi_star, g_value)`` with ``pi_star = |a| (sigma')^{-1} theta_hat``
    and ``g_value = -a^2 |theta_hat|^2 / 2``, where theta_hat is built from
    ``sgn(a) theta``.
    """
    mp = mp or em.params
    if not t < mp.T:
        raise DomainError("optimal_direction requires t < T")
    k = mp.interval(t)
    if a == 0:
        return np.zeros(mp.n), 0.0
    if a > 0:
        theta_hat = em.theta_hat[k]
    else:
        theta_hat = solve_cone_qp(-em.theta[k], mp.sigma[k], em.polar).theta_hat
    pi_star = abs(a) * np.linalg.solve(mp.sigma[k].T, theta_hat)
    if not mp.cone.contains(pi_star, 1e-8):
        raise SolverError(f"pi* = {pi_star} left the trading cone")
    return pi_star, -0.5 * a * a * float(theta_hat @ theta_hat)


@dataclass(frozen=True)
class ParabolicityReport:
    passed: bool
    norms: tuple[float, ...]
    theta_floor: float
    failing_interval: int | None = None

    def describe(self) -> str:
        if self.passed:
            return f"|theta_hat| >= {self.theta_floor:g} on all intervals"
        k = self.failing_interval
        return f"|theta_hat| = {self.norms[k]:g} < {self.theta_floor:g} on interval {k}"


def validate_parabolicity(em: EffectiveMarket, theta_floor: float | None = None) -> ParabolicityReport:
    floor = em.params.theta_floor if theta_floor is None else float(theta_floor)
    if not floor > 0:
        raise ConfigError("theta_floor must be positive", "market.theta_floor")
    norms = tuple(float(np.linalg.norm(v)) for v in em.theta_hat)
    bad = [k for k, v in enumerate(norms) if v < floor]
    return ParabolicityReport(not bad, norms, floor, bad[0] if bad else None)


def cone_from_dict(d: dict, n: int, path: str = "market.cone") -> ConeSpec:
    if not isinstance(d, dict):
        raise ConfigError("expected an object", path)
    extra = set(d) - {"kind", "generators"}
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", path)
    kind = d.get("kind")
    if kind == "whole":
        return ConeSpec.whole(n)
    if kind == "orthant":
        return ConeSpec.orthant(n)
    if kind == "generated":
        g = np.asarray(d.get("generators", []), dtype=float)
        if g.size and (g.ndim != 2 or g.shape[1] != n):
            raise ConfigError(f"generators must be a list of {n}-vectors", f"{path}.generators")
        try:
            return ConeSpec("generated", n, g.reshape(-1, n) if g.size else np.zeros((0, n)))
        except ConfigError as e:
            raise ConfigError(str(e), f"{path}.generators") from None
    raise ConfigError(f"unknown cone kind {kind!r}", f"{path}.kind")


def market_from_dict(d: dict, path: str = "market") -> MarketParams:
    if not isinstance(d, dict):
        raise ConfigError("expected an object", path)
    allowed = {"n", "T", "grid", "b", "sigma", "cone", "theta_floor"}
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", path)
    for key in ("n", "b", "sigma"):
        if key not in d:
            raise ConfigError("missing field", f"{path}.{key}")
    n = int(d["n"])
    T = float(d.get("T", 1.0))
    grid = np.asarray(d.get("grid", [0.0, T]), dtype=float)
    if abs(grid[-1] - T) > 1e-12:
        raise ConfigError(f"grid must end at T={T}", f"{path}.grid")
    b = d["b"]
    m = grid.size - 1
    if len(b) != m:
        raise ConfigError(f"need one vector per interval ({m})", f"{path}.b")
    for k, v in enumerate(b):
        if len(v) != n:
            raise ConfigError(f"expected {n} entries", f"{path}.b[{k}]")
    sig = d["sigma"]
    if len(sig) != m:
        raise ConfigError(f"need one matrix per interval ({m})", f"{path}.sigma")
    mats = [_as_matrix(s, n, f"{path}.sigma[{k}]") for k, s in enumerate(sig)]
    cone = cone_from_dict(d.get("cone", {"kind": "whole"}), n, f"{path}.cone")
    floor = float(d.get("theta_floor", 1e-3))
    if not floor > 0:
        raise ConfigError("theta_floor must be positive", f"{path}.theta_floor")
    return MarketParams(grid, np.asarray(b, dtype=float), np.array(mats), cone, floor)

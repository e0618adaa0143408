"""Independent reference computations used by the tests.

Nothing here imports the package's numerical code; each oracle is either a
closed form or a brute-force computation built on numpy/scipy.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import integrate, optimize


# closed forms -------------------------------------------------------------


def merton_tau(b: float, sigma: float, t: float, T: float = 1.0) -> float:
    theta = b / sigma
    return 0.5 * theta * theta * (T - t)


def merton_value(x, p: float, b: float, sigma: float, t: float = 0.0, T: float = 1.0):
    """u(t, x) for U = x^p in one asset with no constraint."""
    tau = merton_tau(b, sigma, t, T)
    return np.asarray(x, dtype=float) ** p * math.exp(p / (1.0 - p) * tau)


def merton_fraction(p: float, b: float, sigma: float) -> float:
    return b / (sigma * sigma * (1.0 - p))


def power_dual_moment(y, r: float, tau: float):
    """E[(y e^S)^-r] for S ~ N(-tau, 2 tau)."""
    return np.asarray(y, dtype=float) ** -r * math.exp(r * (r + 1.0) * tau)


# conjugates by brute force -----------------------------------------------


def conjugate_brute(U, y: float, x_hi: float = 1e6) -> float:
    """sup_x (U(x) - x y) by dense log-grid search and bounded refinement."""
    xs = np.concatenate([[0.0], np.geomspace(1e-10, x_hi, 20001)])
    vals = np.array([U(x) for x in xs]) - xs * y
    j = int(np.argmax(vals))
    if j == 0:
        return float(vals[0])
    lo, hi = xs[max(j - 1, 0)], xs[min(j + 1, xs.size - 1)]
    res = optimize.minimize_scalar(lambda x: -(U(x) - x * y), bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-14 * max(1.0, hi)})
    return max(float(vals[j]), -float(res.fun))


def kinked_conjugate(y: float) -> float:
    """Conjugate of min(x, sqrt(x)), worked out by hand."""
    if y >= 1.0:
        return 0.0
    if y >= 0.5:
        return 1.0 - y
    return 1.0 / (4.0 * y)


def kinked_U(x: float) -> float:
    return min(x, math.sqrt(x))


# dual value by scipy quadrature ------------------------------------------


def dual_value_quad(Ut, y: float, tau: float, breakpoints=()) -> float:
    """E[Ut(y e^S)], S ~ N(-tau, 2 tau), integrated by scipy.quad in S."""
    s = math.sqrt(2.0 * tau)

    def f(S):
        return Ut(y * math.exp(S)) * math.exp(-((S + tau) ** 2) / (2 * s * s)) / (s * math.sqrt(2 * math.pi))

    pts = sorted(math.log(b / y) for b in breakpoints if b > 0)
    lo, hi = -tau - 40 * s, -tau + 40 * s
    pts = [p for p in pts if lo < p < hi]
    edges = [lo, *pts, hi]
    return sum(integrate.quad(f, a, b, limit=200, epsabs=0, epsrel=1e-13)[0] for a, b in zip(edges, edges[1:]))


# CVaR by sorting ------------------------------------------------------------


def cvar_sorted(z, beta: float) -> tuple[float, float]:
    """(CVaR, VaR) with VaR the smallest order statistic whose empirical cdf reaches beta."""
    z = np.sort(np.asarray(z, dtype=float))
    n = z.size
    k = max(1, math.ceil(beta * n - 1e-9))
    var = z[k - 1]
    cvar = var + np.sum(np.maximum(z - var, 0.0)) / ((1.0 - beta) * n)
    return float(cvar), float(var)


def rockafellar_uryasev_brute(z, beta: float) -> float:
    """min_c [c + E(z - c)^+ / (1 - beta)] with scipy on a convex piecewise-linear objective."""
    z = np.asarray(z, dtype=float)
    F = lambda c: c + np.mean(np.maximum(z - c, 0.0)) / (1.0 - beta)  # noqa: E731
    # the minimum sits at an order statistic; evaluate at all of them
    zs = np.sort(z)
    return float(min(F(c) for c in zs))


# constrained quadratic by zooming grid -----------------------------------


def _cone_coordinates(kind: str, n: int, gens):
    """Map coordinates c to a cone element and return (map, lower bounds)."""
    if kind == "whole":
        return (lambda c: np.asarray(c)), np.full(n, -np.inf), n
    if kind == "orthant":
        return (lambda c: np.asarray(c)), np.zeros(n), n
    G = np.asarray(gens, dtype=float)
    return (lambda c: np.asarray(c) @ G), np.zeros(len(G)), len(G)


def cone_min_grid(g, kind: str, n: int, gens=None, radius: float = 10.0, pts: int = 11, rounds: int = 80) -> float:
    """min over the cone of a convex function g by a zooming grid in cone coordinates."""
    to_pi, lower, m = _cone_coordinates(kind, n, gens)
    if m == 0:
        return float(g(np.zeros(n)))
    center = np.zeros(m)
    half = np.full(m, radius)
    best = float(g(to_pi(center)))
    for _ in range(rounds):
        axes = [np.linspace(max(c - h, lo), c + h, pts) for c, h, lo in zip(center, half, lower)]
        for c in itertools.product(*axes):
            v = float(g(to_pi(np.array(c))))
            if v < best:
                best, center = v, np.array(c)
        half *= 0.6
    return best

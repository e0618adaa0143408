"""Small numerical kernels: NNLS, golden-section search, monotone Newton."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import RangeError, SolverError


def nnls(A: np.ndarray, b: np.ndarray, max_iter: int = 100_000) -> np.ndarray:
    """Lawson-Hanson active set for ``min |A x - b|`` subject to ``x >= 0``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    x = np.zeros(n)
    if n == 0:
        return x
    passive = np.zeros(n, dtype=bool)
    tol = 10.0 * np.finfo(float).eps * max(m, n) * max(np.abs(A).sum(axis=0).max(), 1.0) * max(
        np.linalg.norm(b), 1.0
    )
    w = A.T @ (b - A @ x)
    it = 0
    while (~passive).any() and (w[~passive] > tol).any():
        j = int(np.argmax(np.where(passive, -np.inf, w)))
        passive[j] = True
        while True:
            it += 1
            if it > max_iter:
                raise SolverError(f"nnls did not converge in {max_iter} iterations")
            z = np.zeros(n)
            z[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if (z[passive] > 0).all():
                x = z
                break
            neg = passive & (z <= 0)
            alpha = np.min(x[neg] / (x[neg] - z[neg]))
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
        w = A.T @ (b - A @ x)
    return x


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_max(
    f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-8, max_iter: int = 500
) -> tuple[float, float]:
    """Maximize a unimodal ``f`` on ``[lo, hi]``; returns ``(argmax, max)``."""
    a, b = float(lo), float(hi)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    fx = f(x)
    best = max((fx, x), (fc, c), (fd, d))
    return best[1], best[0]


def monotone_newton(
    F: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]],
    z0,
    tol,
    step: float = 1.0,
    z_min: float = -700.0,
    z_max: float = 700.0,
    max_iter: int = 200,
) -> np.ndarray:
    """Roots of decreasing functions by Newton steps safeguarded with a bracket.

    Vectorized: ``F(z, idx)`` returns ``(values, derivatives)`` for the
    components ``idx`` at abscissae ``z``; each component is an independent
    problem.  Values may be ``+inf`` or
    ``-inf`` where the function is not representable.  Until a sign change is
    seen, steps are capped and doubled geometrically; afterwards Newton steps
    leaving the bracket are replaced by bisection.  Raises `RangeError` when a
    component cannot be bracketed inside ``[z_min, z_max]``.
    """
    z = np.array(z0, dtype=float).reshape(-1)
    tol = np.broadcast_to(np.asarray(tol, dtype=float), z.shape)
    lo = np.full(z.shape, -np.inf)
    hi = np.full(z.shape, np.inf)
    h = np.full(z.shape, float(step))
    done = np.zeros(z.shape, dtype=bool)
    f, d = F(z, np.arange(z.size))
    for _ in range(max_iter):
        done |= np.abs(f) <= tol
        pos = f > 0
        lo = np.where(~done & pos, z, lo)
        hi = np.where(~done & ~pos, z, hi)
        bracketed = np.isfinite(lo) & np.isfinite(hi)
        done |= bracketed & (hi - lo <= 1e-15 * np.maximum(1.0, np.abs(z)))
        if done.all():
            return z
        with np.errstate(invalid="ignore", divide="ignore"):
            newton = np.where((d < 0) & np.isfinite(f), z - f / d, np.nan)
        # before bracketing: Newton step capped at h, then h doubles
        cap = np.clip(newton, z - h, z + h)
        expand = np.where(pos, np.minimum(z + h, z_max), np.maximum(z - h, z_min))
        free = np.where(np.isnan(newton), expand, cap)
        stuck = ~bracketed & ~done & (np.where(pos, z >= z_max, z <= z_min))
        if stuck.any():
            j = int(np.argmax(stuck))
            raise RangeError(
                f"could not bracket root: F({z[j]:g}) = {f[j]:g} with bracket [{lo[j]:g}, {hi[j]:g}]"
            )
        inside = (newton > lo) & (newton < hi)
        bis = 0.5 * (lo + hi)
        z_new = np.where(bracketed, np.where(inside, newton, bis), free)
        h = np.where(bracketed, h, 2.0 * h)
        z = np.where(done, z, z_new)
        act = np.flatnonzero(~done)
        fa, da = F(z[act], act)
        f = f.copy()
        d = d.copy()
        f[act], d[act] = fa, da
    if not done.all():
        j = int(np.argmax(~done))
        raise SolverError(f"monotone Newton did not converge; bracket [{lo[j]:g}, {hi[j]:g}], F={f[j]:g}")
    return z

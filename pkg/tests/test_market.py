from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy.optimize import nnls as scipy_nnls

from dualhjb import (
    ConeSpec,
    ConfigError,
    DomainError,
    EffectiveMarket,
    MarketParams,
    constant_market,
    kkt_residuals,
    optimal_direction,
    polar_cone,
    solve_cone_qp,
    tau_profile,
    validate_parabolicity,
)
from dualhjb._solvers import golden_section_max, monotone_newton, nnls
from dualhjb.errors import RangeError
from dualhjb.market import market_from_dict


def test_orthant_projection_examples():
    sol = solve_cone_qp([-1.0, 1.0], np.eye(2), ConeSpec.orthant(2))
    np.testing.assert_allclose(sol.pi_hat, [1.0, 0.0], atol=1e-14)
    np.testing.assert_allclose(sol.theta_hat, [0.0, 1.0], atol=1e-14)
    sol = solve_cone_qp([1.0, -1.0], np.eye(2), ConeSpec.orthant(2))
    np.testing.assert_allclose(sol.pi_hat, [0.0, 1.0], atol=1e-14)


def test_unconstrained_and_zero_cone():
    th = np.array([0.3, -0.2])
    sig = np.array([[0.4, 0.0], [0.1, 0.3]])
    assert np.allclose(solve_cone_qp(th, sig, polar_cone(ConeSpec.whole(2))).theta_hat, th)
    # K = {0}: the polar is everything and theta_hat vanishes
    assert np.allclose(solve_cone_qp(th, sig, polar_cone(ConeSpec.zero(2))).theta_hat, 0.0)


def test_two_interval_tau():
    mp = MarketParams([0.0, 0.5, 1.0], [[0.2], [0.4]], [0.4, 0.4], ConeSpec.whole(1))
    em = EffectiveMarket.from_params(mp)
    assert tau_profile(em, 0.0) == pytest.approx(0.3125, abs=1e-15)
    assert tau_profile(em, 0.75) == pytest.approx(0.5 * 1.0 * 0.25, abs=1e-15)
    assert tau_profile(em, 1.0) == 0.0
    with pytest.raises(DomainError):
        tau_profile(em, 1.5)


def test_parabolicity_failure_is_reported():
    mp = constant_market([-0.2], [[0.4]], ConeSpec.orthant(1))
    rep = validate_parabolicity(EffectiveMarket.from_params(mp))
    assert not rep.passed and rep.failing_interval == 0
    assert "interval 0" in rep.describe()


def test_merton_direction():
    em = EffectiveMarket.from_params(constant_market([0.2], [[0.4]]))
    for a in (1.0, -1.0, 2.0):
        pi, g = optimal_direction(a, 0.0, em)
        assert pi[0] == pytest.approx(abs(a) * 0.5 / 0.4 * math.copysign(1, a))
        assert g == pytest.approx(-0.5 * a * a * 0.25)


def test_market_from_dict_errors():
    good = {"n": 2, "b": [[0.1, 0.05]], "sigma": [[[0.3, 0.0], [0.0, 0.2]]], "cone": {"kind": "orthant"}}
    assert market_from_dict(good).n == 2
    with pytest.raises(ConfigError, match=r"market\.sigma\[0\]: singular"):
        market_from_dict({**good, "sigma": [[[1.0, 2.0], [2.0, 4.0]]]})
    with pytest.raises(ConfigError, match=r"market\.b\[0\]"):
        market_from_dict({**good, "b": [[0.1]]})
    with pytest.raises(ConfigError, match=r"market\.cone\.kind"):
        market_from_dict({**good, "cone": {"kind": "ball"}})
    with pytest.raises(ConfigError, match="unknown keys"):
        market_from_dict({**good, "rate": 0.01})
    with pytest.raises(ConfigError, match="theta_floor"):
        market_from_dict({**good, "theta_floor": -1})


def test_interval_lookup():
    mp = MarketParams([0.0, 0.5, 1.0], [[0.2], [0.4]], [0.4, 0.4], ConeSpec.whole(1))
    assert [mp.interval(t) for t in (0.0, 0.49, 0.5, 0.99, 1.0)] == [0, 0, 1, 1, 1]


# solvers -----------------------------------------------------------------


def test_nnls_matches_scipy():
    rng = np.random.default_rng(3)
    for _ in range(200):
        m, n = rng.integers(1, 6, size=2)
        A = rng.normal(size=(m, n))
        b = rng.normal(size=m)
        x = nnls(A, b)
        ref, _ = scipy_nnls(A, b)
        assert np.all(x >= 0)
        assert np.linalg.norm(A @ x - b) == pytest.approx(np.linalg.norm(A @ ref - b), abs=1e-10)


def test_golden_section_and_newton():
    x, v = golden_section_max(lambda z: -(z - 0.3) ** 2, -2.0, 2.0, 1e-10)
    assert x == pytest.approx(0.3, abs=1e-8) and v == pytest.approx(0.0, abs=1e-15)

    target = np.array([0.5, 2.0, 10.0])

    def F(z, idx):  # decreasing in z
        return target[idx] - np.exp(z), -np.exp(z)

    z = monotone_newton(F, np.zeros(3), 1e-14)
    np.testing.assert_allclose(np.exp(z), target, rtol=1e-13)
    with pytest.raises(RangeError):
        monotone_newton(lambda z, idx: (np.ones_like(z), -np.ones_like(z) * 1e-3), np.zeros(1), 1e-12, z_min=-5, z_max=5)


# properties ----------------------------------------------------------------


def _sigma(draw, n):
    A = draw(hnp.arrays(float, (n, n), elements=st.floats(-1, 1)))
    U, _, Vt = np.linalg.svd(A + 1e-3 * np.eye(n))
    s = draw(hnp.arrays(float, n, elements=st.floats(0.2, 1.0)))
    return U @ np.diag(s) @ Vt


@st.composite
def instances(draw):
    n = draw(st.integers(1, 3))
    theta = draw(hnp.arrays(float, n, elements=st.floats(-2, 2)))
    sigma = _sigma(draw, n)
    kind = draw(st.sampled_from(["whole", "orthant", "generated"]))
    if kind == "generated":
        m = draw(st.integers(1, n + 1))
        G = draw(hnp.arrays(float, (m, n), elements=st.floats(-1, 1)))
        assume(np.all(np.linalg.norm(G, axis=1) > 0.1))
        K = ConeSpec.generated(G)
    else:
        K = getattr(ConeSpec, kind)(n)
    return theta, sigma, K


@given(instances())
@settings(max_examples=150, deadline=None)
def test_kkt_certificate(inst):
    theta, sigma, K = inst
    Kt = polar_cone(K)
    sol = solve_cone_qp(theta, sigma, Kt)
    assert kkt_residuals(theta, sigma, Kt, sol.pi_hat).max() <= 1e-8 * max(1.0, float(theta @ theta))
    assert Kt.contains(sol.pi_hat, 1e-8)
    # the direction (sigma')^{-1} theta_hat is a feasible portfolio
    assert K.contains(np.linalg.solve(sigma.T, sol.theta_hat), 1e-8)


@given(instances(), st.floats(0.01, 100.0))
@settings(max_examples=100, deadline=None)
def test_positive_homogeneity(inst, c):
    theta, sigma, K = inst
    Kt = polar_cone(K)
    a = solve_cone_qp(theta, sigma, Kt).theta_hat
    b = solve_cone_qp(c * theta, sigma, Kt).theta_hat
    np.testing.assert_allclose(b, c * a, atol=1e-9 * max(1.0, c))


@given(instances())
@settings(max_examples=100, deadline=None)
def test_optimality_against_feasible_perturbations(inst):
    theta, sigma, K = inst
    Kt = polar_cone(K)
    sol = solve_cone_qp(theta, sigma, Kt)
    f = lambda v: float(np.sum((theta + np.linalg.solve(sigma, v)) ** 2))  # noqa: E731
    best = f(sol.pi_hat)
    rng = np.random.default_rng(0)
    G = Kt.generator_matrix()
    for _ in range(30):
        if Kt.kind == "halfspace" or G is None:
            v = rng.normal(size=theta.size)
            if not Kt.contains(v, 0.0):
                continue
        elif len(G) == 0:
            v = np.zeros(theta.size)
        else:
            v = rng.exponential(size=len(G)) @ G
        for s in (1e-3, 0.1, 1.0):
            assert f(sol.pi_hat + s * v) >= best - 1e-10


@given(hnp.arrays(float, (2, 2), elements=st.floats(-1, 1)), hnp.arrays(float, 2, elements=st.floats(-3, 3)))
@settings(max_examples=200)
def test_polar_duality_membership(G, v):
    assume(np.all(np.linalg.norm(G, axis=1) > 0.1))
    K = ConeSpec.generated(G)
    Kp = polar_cone(K)
    # membership in the polar is exactly nonnegativity against the generators
    margins = G @ v
    assume(np.all(np.abs(margins) > 1e-6))
    assert Kp.contains(v, 0.0) == bool(np.all(margins >= 0))
    # the double polar is K itself
    Kpp = polar_cone(Kp)
    assert Kpp.kind == "generated"
    np.testing.assert_array_equal(Kpp.vectors, K.vectors)

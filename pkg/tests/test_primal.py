from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dualhjb import (
    ConeSpec,
    DomainError,
    EffectiveMarket,
    PowerUtility,
    build_surface,
    constant_market,
    dual_from_primal_grid,
    growth_check,
    growth_constants,
    hamiltonian,
    hamiltonian_integrand,
    hat_v,
    hat_v_derivs,
    hjb_residual_grid,
    inverse_y,
    kinked_utility,
    optimal_control,
    primal_from_dual_grid,
    u_derivs,
    u_value,
)

MP = constant_market([0.2], [[0.4]])
MP_LONG = constant_market([0.2], [[0.4]], ConeSpec.orthant(1))


@pytest.fixture(scope="module")
def merton():
    return build_surface(PowerUtility(0.5), MP)


@pytest.fixture(scope="module")
def kinked():
    return build_surface(kinked_utility(), MP_LONG)


def test_boundary_values(kinked):
    for x in (0.3, 1.0, 7.0):
        assert u_value(kinked, 1.0, x) == pytest.approx(min(x, math.sqrt(x)))
    assert u_value(kinked, 0.4, 0.0) == 0.0
    with pytest.raises(DomainError):
        u_value(kinked, 1.5, 1.0)
    with pytest.raises(DomainError):
        u_value(kinked, 0.5, -1.0)
    with pytest.raises(DomainError):
        u_derivs(kinked, 1.0, 1.0)


def test_merton_derivatives(merton):
    p, th2 = 0.5, 0.25
    for t in (0.0, 0.6):
        for x in (0.05, 1.0, 30.0):
            u = float(oracles.merton_value(x, p, 0.2, 0.4, t))
            got = u_derivs(merton, t, x)
            want = (u, -p / (1 - p) * 0.5 * th2 * u, p * u / x, p * (p - 1) * u / (x * x))
            np.testing.assert_allclose(got, want, rtol=1e-10)


def test_u_t_matches_time_difference(kinked):
    h = 1e-4
    for x in (0.2, 1.0, 5.0):
        fd = (u_value(kinked, 0.5 + h, x) - u_value(kinked, 0.5 - h, x)) / (2 * h)
        assert u_derivs(kinked, 0.5, x)[1] == pytest.approx(fd, rel=1e-6)


def test_hamiltonian_is_supremum():
    em = EffectiveMarket.from_params(MP)
    pis = np.linspace(-20, 20, 40001)
    for p_slope, M in ((0.5, -0.2), (2.0, -3.0)):
        best = max(hamiltonian_integrand(0.3, 1.5, p_slope, M, [pi], MP) for pi in pis)
        assert hamiltonian(0.3, 1.5, p_slope, M, em) == pytest.approx(best, rel=1e-6)
    assert hamiltonian(0.3, 1.5, 1.0, 0.0, em) == math.inf
    with pytest.raises(DomainError):
        hamiltonian(0.3, 1.5, -1.0, -1.0, em)


def test_hjb_holds_pointwise(kinked):
    em = kinked.market
    for t in (0.0, 0.5):
        for x in (0.1, 0.8, 4.0):
            u, ut, ux, uxx = u_derivs(kinked, t, x)
            H = hamiltonian(t, x, ux, uxx, em)
            assert abs(ut + H) <= 1e-6 * (abs(ut) + abs(H))


def test_control_in_cone_and_attains_hamiltonian(kinked):
    em = kinked.market
    for t in (0.0, 0.7):
        for x in (0.1, 1.0, 3.0):
            pi = np.asarray(optimal_control(kinked, t, x))
            assert MP_LONG.cone.contains(pi, 1e-12)
            _, _, ux, uxx = u_derivs(kinked, t, x)
            val = hamiltonian_integrand(t, x, ux, uxx, pi, MP_LONG)
            assert val == pytest.approx(hamiltonian(t, x, ux, uxx, em), rel=1e-9)


def test_merton_control(merton):
    for x in (0.1, 10.0):
        pi = np.asarray(optimal_control(merton, 0.2, x))
        assert pi[0] == pytest.approx(oracles.merton_fraction(0.5, 0.2, 0.4), rel=1e-9)


def test_growth_constants_formula():
    K, Kt = growth_constants(1.0, 0.5, 0.0)
    assert (K, Kt) == pytest.approx((1.0, 3.0))
    K2, _ = growth_constants(2.0, 0.5, 0.25)
    assert K2 == pytest.approx(2.0 * math.exp(0.5))


def test_growth_check(kinked):
    rep = growth_check(kinked, [0.0, 0.5, 0.9], np.geomspace(0.01, 100, 12))
    assert rep.passed, rep.detail


def test_conjugacy_both_ways(kinked):
    ys = np.geomspace(1e-3, 10.0, 161)
    xs = np.geomspace(1e-4, 1e4, 161)
    for x in (0.3, 2.0):
        assert primal_from_dual_grid(kinked, 0.4, x, ys) == pytest.approx(u_value(kinked, 0.4, x), rel=1e-9)
    for y in (0.3, 0.8):
        assert dual_from_primal_grid(kinked, 0.4, y, xs) == pytest.approx(float(hat_v(kinked.dual, 0.4, y)), rel=1e-8)


def test_merton_residual_grid(merton):
    rep = hjb_residual_grid(merton, np.linspace(0, 0.9, 5), np.geomspace(0.1, 10, 5))
    assert rep.max <= 1e-4 and not rep.unresolved()


@given(t=st.floats(0.0, 0.98), x=st.floats(0.01, 50.0), h=st.floats(0.01, 1.0))
@settings(max_examples=40, deadline=None)
def test_increasing_and_concave_in_x(kinked, t, x, h):
    a, b, c = (u_value(kinked, t, x * (1 + h) ** k) for k in range(3))
    assert a < b < c
    # concavity on the geometric triple: chord slopes decrease
    s1 = (b - a) / (x * h)
    s2 = (c - b) / (x * (1 + h) * h)
    assert s2 <= s1 * (1 + 1e-10)


@given(y=st.floats(0.1, 10.0))
@settings(max_examples=15, deadline=None)
def test_conjugacy_round_trip_range(kinked, y):
    # the maximizing wealth -V^_y(t, y) falls to ~4e-10 at y = 10
    xs = np.geomspace(1e-14, 1e4, 361)
    want = float(hat_v(kinked.dual, 0.4, y))
    assert dual_from_primal_grid(kinked, 0.4, y, xs) == pytest.approx(want, rel=1e-5)


def test_marginal_value_identity(kinked):
    for t in (0.0, 0.9):
        for x in (0.05, 1.0, 9.0):
            _, _, ux, uxx = u_derivs(kinked, t, x)
            y = inverse_y(kinked.dual, t, x, 1e-13)
            assert ux == pytest.approx(y, rel=1e-12)
            assert uxx * hat_v_derivs(kinked.dual, t, y)[2] == pytest.approx(-1.0, abs=1e-8)


def test_perturbed_control_does_not_improve(kinked):
    for t, x in ((0.0, 0.5), (0.5, 2.0)):
        pi = np.asarray(optimal_control(kinked, t, x))
        _, _, ux, uxx = u_derivs(kinked, t, x)
        best = hamiltonian_integrand(t, x, ux, uxx, pi, MP_LONG)
        for eps in (1e-4, 1e-2, 1.0):
            for d in (1.0, -min(1.0, pi[0] / eps)):
                assert hamiltonian_integrand(t, x, ux, uxx, pi + eps * d, MP_LONG) <= best + 1e-12

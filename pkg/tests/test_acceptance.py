"""Acceptance criteria. Each test carries a ``criterion`` marker; the terminal
summary prints one PASS/FAIL line per criterion with the measured numbers."""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from dualhjb import (
    ConeSpec,
    CvarSpec,
    DualSurface,
    EffectiveMarket,
    OptimalFeedback,
    Pipeline,
    PowerUtility,
    SimConfig,
    build_surface,
    constant_market,
    cvar_tail_average,
    cvar_var_of_sample,
    duality_pairing_check,
    dynamic_risk_aversion,
    frontier_monotone,
    frontier_sweep,
    hat_v,
    hat_v_derivs,
    hjb_residual_grid,
    inverse_y,
    kinked_utility,
    kkt_residuals,
    monotonicity_report,
    optimal_control,
    optimal_direction,
    polar_cone,
    power_dual,
    primal_from_dual_grid,
    dual_from_primal_grid,
    solve_cone_qp,
    u_derivs,
    u_value,
    verify_value,
)
from dualhjb.cli import main, run_subcommand
from dualhjb.config import MERTON_SCENARIO, build_config

B, SIG = 0.2, 0.4
MC_PATHS, MC_STEPS = 100_000, 250


@pytest.fixture(scope="module")
def merton_market():
    return constant_market([B], [[SIG]])


@pytest.fixture(scope="module")
def merton(merton_market):
    return build_surface(PowerUtility(0.5), merton_market)


@pytest.fixture(scope="module")
def kinked(merton_market):
    return build_surface(kinked_utility(), merton_market)


# 1 -----------------------------------------------------------------------


@pytest.mark.criterion(1, "Merton oracle end to end (u within 1e-6 rel, pi* = 2.5 within 1e-6, < 5 s)")
def test_merton_oracle(measure):
    t0 = time.perf_counter()
    ps = build_surface(PowerUtility(0.5), constant_market([B], [[SIG]]))
    xs = np.geomspace(0.1, 10.0, 25)
    got = np.array([u_value(ps, 0.0, x) for x in xs])
    want = oracles.merton_value(xs, 0.5, B, SIG)
    assert math.isclose(oracles.merton_tau(B, SIG, 0.0), 0.125)
    rel = float(np.max(np.abs(got / want - 1.0)))
    pis = np.array([optimal_control(ps, t, x).pi[0] for t in (0.0, 0.25, 0.5, 0.75, 0.99) for x in xs])
    pi_err = float(np.max(np.abs(pis - oracles.merton_fraction(0.5, B, SIG))))
    elapsed = time.perf_counter() - t0
    measure("u_rel_err", f"{rel:.2e}")
    measure("pi_err", f"{pi_err:.2e}")
    measure("seconds", f"{elapsed:.2f}")
    assert rel <= 1e-6
    assert pi_err <= 1e-6
    assert elapsed < 5.0


# 2 -----------------------------------------------------------------------


@pytest.mark.criterion(2, "dual quadrature vs y^-r e^{r(r+1)tau} (1e-8 rel, < 1 s)")
def test_dual_quadrature_oracle(merton_market, measure):
    em = EffectiveMarket.from_params(merton_market)
    ys = np.geomspace(1e-2, 1e2, 81)
    t0 = time.perf_counter()
    worst = 0.0
    for r in (0.5, 1.0, 2.0):
        ds = DualSurface(power_dual(r), em)
        for t in (0.0, 0.5 * ds.T):
            want = oracles.power_dual_moment(ys, r, oracles.merton_tau(B, SIG, t))
            worst = max(worst, float(np.max(np.abs(hat_v(ds, t, ys) / want - 1.0))))
    elapsed = time.perf_counter() - t0
    measure("rel_err", f"{worst:.2e}")
    measure("seconds", f"{elapsed:.3f}")
    assert worst <= 1e-8
    assert elapsed < 1.0


# 3 -----------------------------------------------------------------------

TS_50 = np.linspace(0.0, 0.99, 50)
XS_50 = np.geomspace(1e-2, 1e2, 50)
# covers the curved part (y < 1/2), the affine piece [1/2, 1] and the zero region y > 1
YS_50 = np.geomspace(0.05, 5.0, 50)


@pytest.mark.criterion(3, "smoothing of min(x, sqrt x): V_yy > 0, u_xx < 0 on 50x50 grids")
def test_kinked_strict_convexity(kinked, measure):
    vyy = np.array([hat_v_derivs(kinked.dual, t, YS_50)[2] for t in TS_50])
    uxx = np.array([
        -1.0 / hat_v_derivs(kinked.dual, t, inverse_y(kinked.dual, t, XS_50, 1e-12))[2] for t in TS_50
    ])
    # spot check against the scalar primal API
    for t in TS_50[::7]:
        for x in XS_50[::7]:
            assert u_derivs(kinked, t, x)[3] < 0
    flat = YS_50 >= 0.5
    measure("min_V_yy", f"{vyy.min():.3e}")
    measure("min_V_yy_flat_region", f"{vyy[:, flat].min():.3e}")
    measure("max_u_xx", f"{uxx.max():.3e}")
    assert flat.sum() > 10
    assert np.all(vyy > 0)
    assert np.all(uxx < 0)


@pytest.mark.criterion(3, "smoothing of min(x, sqrt x): HJB residual <= 1e-4, second order under halving")
def test_kinked_hjb_residual(kinked, measure):
    r1 = hjb_residual_grid(kinked, TS_50, XS_50, step=0.01)
    r2 = hjb_residual_grid(kinked, TS_50, XS_50, step=0.005)
    order = math.log2(r1.max / r2.max)
    measure("residual_step_0.01", f"{r1.max:.2e}")
    measure("residual_step_0.005", f"{r2.max:.2e}")
    measure("observed_order", f"{order:.2f}")
    assert not r1.unresolved() and not r2.unresolved()
    assert r1.max <= 1e-4
    assert r2.max <= 1e-4
    assert order >= 1.8


# 4 -----------------------------------------------------------------------


def _random_instance(rng, n):
    A = rng.normal(size=(n, n))
    U, _, Vt = np.linalg.svd(A)
    sigma = U @ np.diag(rng.uniform(0.2, 1.0, n)) @ Vt
    theta = rng.normal(size=n) * rng.uniform(0.2, 1.5)
    kind = rng.choice(["whole", "orthant", "generated"])
    if kind == "whole":
        K = ConeSpec.whole(n)
    elif kind == "orthant":
        K = ConeSpec.orthant(n)
    else:
        m = int(rng.integers(1, n + 2))
        K = ConeSpec.generated(rng.normal(size=(m, n)))
    return theta, sigma, K


@pytest.mark.criterion(4, "cone QP certification on 100 random instances (KKT, Df in K, g vs grid search; 1e-8)")
def test_cone_qp_random(measure):
    rng = np.random.default_rng(20240601)
    worst_kkt = worst_g = 0.0
    grid_checked = 0
    for i in range(100):
        n = 1 + i % 3
        theta, sigma, K = _random_instance(rng, n)
        Kt = polar_cone(K)
        sol = solve_cone_qp(theta, sigma, Kt)
        res = kkt_residuals(theta, sigma, Kt, sol.pi_hat)
        worst_kkt = max(worst_kkt, res.max())
        df = 2.0 * np.linalg.solve(sigma.T, sol.theta_hat)
        assert K.contains(df, 1e-8), (i, df)
        if n <= 2 and np.linalg.norm(sol.theta_hat) > 1e-3:
            b = sigma @ theta
            mp = constant_market(b, sigma, K)
            em = EffectiveMarket.from_params(mp)
            a = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0))
            pi_star, g_val = optimal_direction(a, 0.0, em, mp)

            def g(pi, a=a, b=b, sigma=sigma):
                sp = sigma.T @ pi
                return 0.5 * sp @ sp - a * pi @ b

            gens = K.vectors if K.kind == "generated" else None
            ref = oracles.cone_min_grid(g, K.kind, n, gens, radius=4.0 * abs(a) * np.linalg.norm(theta) / 0.2 + 1.0)
            worst_g = max(worst_g, abs(g_val - ref), abs(g(pi_star) - ref))
            grid_checked += 1
    measure("max_kkt", f"{worst_kkt:.2e}")
    measure("max_g_gap", f"{worst_g:.2e}")
    measure("grid_instances", grid_checked)
    assert worst_kkt <= 1e-8
    assert worst_g <= 1e-8
    assert grid_checked >= 20


# 5 -----------------------------------------------------------------------


@pytest.mark.criterion(5, "conjugacy round trips for power and kinked utilities (1e-5 rel)")
@pytest.mark.parametrize("name", ["power", "kinked"])
def test_conjugacy_round_trip(name, merton, kinked, measure):
    ps = merton if name == "power" else kinked
    ys_search = np.geomspace(1e-4, 1e4, 161)
    xs_search = np.geomspace(1e-6, 1e6, 241)
    worst_p = worst_d = 0.0
    for t in (0.0, 0.5, 0.9):
        for x in (0.1, 0.5, 1.0, 2.0, 10.0):
            u = u_value(ps, t, x)
            worst_p = max(worst_p, abs(primal_from_dual_grid(ps, t, x, ys_search) - u) / abs(u))
        for y in (0.05, 0.2, 0.5, 0.8):
            v = float(hat_v(ps.dual, t, y))
            worst_d = max(worst_d, abs(dual_from_primal_grid(ps, t, y, xs_search) - v) / abs(v))
    measure(f"{name}_primal_rel", f"{worst_p:.2e}")
    measure(f"{name}_dual_rel", f"{worst_d:.2e}")
    assert worst_p <= 1e-5
    assert worst_d <= 1e-5


# 6, 7 ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def mc_cfg():
    return SimConfig(paths=MC_PATHS, steps_per_year=MC_STEPS, seed=12345)


@pytest.fixture(scope="module")
def feedbacks(merton, kinked):
    return {"merton": (merton, 1.0, OptimalFeedback(merton, 1.0)), "kinked": (kinked, 2.0, OptimalFeedback(kinked, 2.0))}


@pytest.mark.slow
@pytest.mark.criterion(6, "Monte Carlo verification: optimal within 3 s.e., basket below (1e5 paths, 250 steps, < 60 s)")
@pytest.mark.parametrize("name", ["merton", "kinked"])
def test_mc_verification(name, feedbacks, merton_market, mc_cfg, measure):
    ps, x0, _ = feedbacks[name]
    t0 = time.perf_counter()
    fb = OptimalFeedback(ps, x0)
    rep = verify_value(ps, merton_market, mc_cfg, x0, n_se=3.0, feedback=fb)
    elapsed = time.perf_counter() - t0
    measure(f"{name}_z", f"{rep.optimal.z:.2f}")
    measure(f"{name}_basket_z", ",".join(f"{c.name}:{c.z:.1f}" for c in rep.basket))
    measure(f"{name}_seconds", f"{elapsed:.1f}")
    assert abs(rep.optimal.z) <= 3.0
    assert all(c.passed for c in rep.basket)
    assert elapsed < 60.0


@pytest.mark.slow
@pytest.mark.criterion(7, "duality pairing E[X_T Y_T] = x0 y* (3 s.e.; suboptimal below)")
@pytest.mark.parametrize("name", ["merton", "kinked"])
def test_duality_pairing(name, feedbacks, merton_market, mc_cfg, measure):
    ps, x0, fb = feedbacks[name]
    em = ps.market
    rep = duality_pairing_check(ps, em, merton_market, mc_cfg, x0, n_se=3.0, feedback=fb)
    measure(f"{name}_z", f"{rep.optimal.z:.2f}")
    measure(f"{name}_basket_z", ",".join(f"{c.name}:{c.z:.1f}" for c in rep.basket))
    assert rep.optimal.passed
    assert all(c.passed for c in rep.basket)


# 8 -----------------------------------------------------------------------


@pytest.mark.criterion(8, "CVaR: R-U equals tail average (1e-10) on 1e5 samples")
def test_cvar_ru_vs_tail(measure):
    rng = np.random.default_rng(7)
    worst = 0.0
    for beta in (0.5, 0.9, 0.95, 0.99):
        for z in (rng.normal(size=100_000), rng.lognormal(size=100_000), rng.integers(0, 50, 100_000).astype(float)):
            cv, var = cvar_var_of_sample(z, beta)
            worst = max(worst, abs(cv - cvar_tail_average(z, beta)), abs(cv - oracles.cvar_sorted(z, beta)[0]))
            assert var == oracles.cvar_sorted(z, beta)[1]
    z = rng.normal(size=2000)
    worst = max(worst, abs(cvar_var_of_sample(z, 0.9)[0] - oracles.rockafellar_uryasev_brute(z, 0.9)))
    measure("max_gap", f"{worst:.2e}")
    assert worst <= 1e-10


@pytest.mark.slow
@pytest.mark.criterion(8, "CVaR frontier: lambda=0 reproduces u(0,x0) within 3 s.e.; CVaR nonincreasing in lambda")
def test_cvar_frontier(merton_market, measure):
    em = EffectiveMarket.from_params(merton_market)
    pipe = Pipeline(PowerUtility(0.5), em)
    cfg = SimConfig(paths=20_000, steps_per_year=MC_STEPS, seed=99)
    pts = frontier_sweep(CvarSpec(0.9, 0.0, 1.0), [0.0, 0.25, 0.5, 1.0, 2.0], pipe, cfg)
    target = float(oracles.merton_value(1.0, 0.5, B, SIG))
    z0 = (pts[0].utility_mc - target) / pts[0].se_utility
    measure("lambda0_z", f"{z0:.2f}")
    measure("cvar", ",".join(f"{p.cvar_mc:.4f}" for p in pts))
    assert abs(z0) <= 3.0
    assert frontier_monotone(pts, 3.0)


# 9 -----------------------------------------------------------------------


@pytest.mark.criterion(9, "risk aversion of x^p: R(t,x) = (1-p)/x (1e-6), decreasing; w_yy sign test")
@pytest.mark.parametrize("p", [0.3, 0.5, 0.7])
def test_risk_aversion_power(p, merton_market, measure):
    ps = build_surface(PowerUtility(p), merton_market)
    ts = [0.0, 0.3, 0.6, 0.9, 0.99]
    xs = np.geomspace(0.05, 20.0, 25)
    worst = 0.0
    for t in ts:
        R = np.asarray(dynamic_risk_aversion(ps, t, xs))
        worst = max(worst, float(np.max(np.abs(R * xs / (1.0 - p) - 1.0))))
        assert np.all(np.diff(R) < 0)
    rep = monotonicity_report(ps, ts, xs)
    measure(f"p={p}_rel_err", f"{worst:.2e}")
    measure(f"p={p}_w_shape", rep.w_shape[0])
    assert worst <= 1e-6
    assert rep.preserved
    assert rep.w_sign_ok


# 10 ----------------------------------------------------------------------


def _outputs(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "timings.json"}


@pytest.mark.slow
@pytest.mark.criterion(10, "reproducibility: selftest byte-identical across runs and worker counts")
def test_selftest_reproducible(tmp_path, measure):
    cfg = build_config({**MERTON_SCENARIO, "seed": 4242})
    c1, _ = run_subcommand("selftest", cfg, tmp_path / "a")
    c2, _ = run_subcommand("selftest", cfg, tmp_path / "b")
    c3, _ = run_subcommand("selftest", cfg.with_overrides(workers=3), tmp_path / "c")
    a, b, c = (_outputs(tmp_path / s) for s in "abc")
    measure("files", ",".join(a))
    assert (c1, c2, c3) == (0, 0, 0)
    assert a == b
    assert a == c


# CLI contract ------------------------------------------------------------


@pytest.mark.criterion(11, "CLI contract: unknown subcommand exits 1; kinked solve-primal columns")
def test_cli_contract(tmp_path, capsys):
    assert main(["no-such-command"]) == 1
    code = main(["solve-primal", "--scenario", "kinked", "--out", str(tmp_path)])
    assert code == 0
    header = (tmp_path / "primal.csv").read_text().splitlines()[0]
    assert header == "t,x,u,u_x,u_xx,pi_1,residual"

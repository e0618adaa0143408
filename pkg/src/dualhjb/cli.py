"""Command-line driver: ``dualhjb <subcommand> [--config FILE] [--seed N] [--out DIR] [--workers N]``.

Every flag can also be set through an environment variable with the
``DUALHJB_`` prefix (``DUALHJB_CONFIG``, ``DUALHJB_SEED``, ``DUALHJB_OUT``,
``DUALHJB_WORKERS``); flags win over the environment.

Exit codes: 0 when every built-in check passes, 2 when a mathematical check
fails, 1 on any error (bad config, solver failure, usage).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .applications import (
    CvarSpec,
    Pipeline,
    cvar_var_of_sample,
    frontier_monotone,
    frontier_sweep,
    monotonicity_report,
    static_risk_aversion,
)
from .config import KINKED_SCENARIO, MERTON_SCENARIO, ScenarioConfig, build_config, load_config
from .dual import DualSurface, dual_pde_residual, hat_v, hat_v_derivs, inverse_y, power_dual
from .errors import CapabilityError, ConfigError, DualHJBError
from .market import ConeSpec, EffectiveMarket, MarketParams, solve_cone_qp, tau_profile, validate_parabolicity
from .primal import build_surface, hjb_residual_grid, optimal_control, u_value
from .simulation import (
    OptimalFeedback,
    SimConfig,
    duality_pairing_check,
    novikov_diagnostic,
    simulate_wealth,
    verify_value,
)
from .utility import validate_assumption1

__all__ = ["main", "run_subcommand", "SUBCOMMANDS"]

SUBCOMMANDS = ("solve-dual", "solve-primal", "control", "simulate", "verify", "cvar-frontier", "risk-profile", "selftest")
ENV_PREFIX = "DUALHJB_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


class _Run:
    """Collects outputs, checks and diagnostics for one subcommand."""

    def __init__(self, name: str, cfg: ScenarioConfig):
        self.name = name
        self.cfg = cfg
        self.files: dict[str, str] = {}
        self.checks: dict[str, bool] = {}
        self.diagnostics: dict = {}
        self.timings: dict[str, float] = {}

    @contextmanager
    def stage(self, label: str):
        t0 = time.perf_counter()
        try:
            yield
        except DualHJBError as e:
            raise StageError(label, e) from e
        finally:
            self.timings[label] = round(time.perf_counter() - t0, 6)

    def table(self, fname: str, header: list[str], rows: list[list]):
        self.files[fname] = _csv_text(header, rows)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def report(self) -> dict:
        return {
            "version": __version__,
            "subcommand": self.name,
            "scenario_hash": self.cfg.digest(),
            "seed": self.cfg.seed,
            "config": json.loads(self.cfg.canonical()),
            "diagnostics": self.diagnostics,
            "outputs": {k: hashlib.sha256(v.encode()).hexdigest() for k, v in sorted(self.files.items())},
            "checks": self.checks,
            "passed": self.passed,
        }


class StageError(Exception):
    def __init__(self, stage: str, err: Exception):
        self.stage, self.err = stage, err
        super().__init__(f"stage '{stage}' failed: {err}")


def _market_diagnostics(run: _Run, em: EffectiveMarket):
    par = validate_parabolicity(em)
    run.diagnostics["parabolicity"] = {"passed": par.passed, "detail": par.describe()}
    run.diagnostics["sigma_condition"] = [float(c) for c in em.params.condition_numbers()]
    run.diagnostics["tau0"] = tau_profile(em, 0.0)
    if not par.passed:
        raise StageError("market", ConfigError(par.describe(), "market.theta_floor"))


def _prepare(run: _Run):
    cfg = run.cfg
    with run.stage("market"):
        em = EffectiveMarket.from_params(cfg.market)
        _market_diagnostics(run, em)
    with run.stage("utility"):
        rep = validate_assumption1(cfg.utility)
        run.diagnostics["utility_validation"] = {k: v.passed for k, v in rep.checks.items()}
        if not rep.passed:
            raise StageError("utility", ConfigError(f"utility fails validation: {rep.failures()}", "utility"))
    with run.stage("surface"):
        ps = build_surface(cfg.utility, em, cfg.quad)
        run.diagnostics["growth_bound"] = ps.growth_bound
    return em, ps


def _cmd_solve_dual(run: _Run):
    cfg = run.cfg
    em, ps = _prepare(run)
    rows = []
    worst = 0.0
    with run.stage("dual"):
        for t in cfg.t_grid:
            v, vy, vyy = hat_v_derivs(ps.dual, float(t), cfg.y_grid)
            res = dual_pde_residual(ps.dual, float(t), cfg.y_grid)
            worst = max(worst, float(np.max(res)))
            for j, y in enumerate(cfg.y_grid):
                rows.append([t, y, v[j], vy[j], vyy[j], res[j]])
                run.checks.setdefault("hatV_y_negative", True)
                run.checks["hatV_y_negative"] &= bool(vy[j] < 0 or v[j] == 0)
                run.checks.setdefault("hatV_yy_positive", True)
                run.checks["hatV_yy_positive"] &= bool(vyy[j] > 0 or v[j] == 0)
    run.diagnostics["max_dual_residual"] = worst
    run.checks["dual_residual"] = worst <= 1e-4
    run.table("dual.csv", ["t", "y", "hatV", "hatV_y", "hatV_yy", "residual"], rows)


def _pi_cols(n: int) -> list[str]:
    return [f"pi_{i + 1}" for i in range(n)]


def _cmd_solve_primal(run: _Run):
    cfg = run.cfg
    em, ps = _prepare(run)
    n = cfg.market.n
    rows = []
    with run.stage("residual"):
        rep = hjb_residual_grid(ps, cfg.t_grid, cfg.x_grid)
    with run.stage("primal"):
        ok_x, ok_xx = True, True
        for i, t in enumerate(cfg.t_grid):
            ys = inverse_y(ps.dual, float(t), cfg.x_grid, 1e-12)
            v, _, vyy = hat_v_derivs(ps.dual, float(t), ys)
            d = em.direction(float(t))
            for j, x in enumerate(cfg.x_grid):
                u = v[j] + x * ys[j]
                pi = d * (ys[j] * vyy[j] / x)
                rows.append([t, x, u, ys[j], -1.0 / vyy[j], *pi, rep.residual[i, j]])
                ok_x &= bool(ys[j] > 0)
                ok_xx &= bool(vyy[j] > 0)
    run.checks["u_x_positive"] = ok_x
    run.checks["u_xx_negative"] = ok_xx
    # points whose stencil sits below the float noise floor are listed, not scored
    run.checks["hjb_residual"] = rep.max_resolved <= 1e-4
    run.diagnostics["hjb_residual"] = {
        "max": rep.max,
        "max_resolved": rep.max_resolved,
        "mean": rep.mean,
        "argmax": list(rep.argmax()),
        "unresolved": [list(p) for p in rep.unresolved()],
    }
    run.table("primal.csv", ["t", "x", "u", "u_x", "u_xx", *_pi_cols(n), "residual"], rows)


def _cmd_control(run: _Run):
    cfg = run.cfg
    em, ps = _prepare(run)
    n = cfg.market.n
    rows = []
    inside = True
    with run.stage("control"):
        for t in cfg.t_grid:
            ys = inverse_y(ps.dual, float(t), cfg.x_grid, 1e-12)
            _, _, vyy = hat_v_derivs(ps.dual, float(t), ys)
            d = em.direction(float(t))
            for j, x in enumerate(cfg.x_grid):
                pi = d * (ys[j] * vyy[j] / x)
                inside &= cfg.market.cone.contains(pi, 1e-8)
                rows.append([t, x, *pi])
    run.checks["control_in_cone"] = inside
    run.table("control.csv", ["t", "x", *_pi_cols(n)], rows)


def _cmd_simulate(run: _Run):
    cfg = run.cfg
    em, ps = _prepare(run)
    with run.stage("simulate"):
        target = u_value(ps, 0.0, cfg.x0)
        res = simulate_wealth(cfg.market, OptimalFeedback(ps, cfg.x0), cfg.x0, cfg.sim, cfg.utility)
        nov = novikov_diagnostic(res)
    z = (res.mean - target) / res.stderr if res.stderr > 0 else 0.0
    run.checks["within_4_se"] = abs(z) <= 4.0
    run.diagnostics["novikov"] = nov.__dict__
    run.table(
        "simulate.csv",
        ["control", "paths", "mean_utility", "stderr", "u0", "z", "novikov_mean", "novikov_max", "novikov_suspect"],
        [["optimal", res.paths, res.mean, res.stderr, target, z, nov.mean, nov.max, nov.suspect]],
    )
    if cfg.per_path:
        U = np.asarray(cfg.utility(res.terminal_wealth), dtype=float)
        run.table(
            "paths.csv",
            ["path", "x_T", "utility", "control_norm"],
            [[i, x, u, c] for i, (x, u, c) in enumerate(zip(res.terminal_wealth, U, res.control_norms))],
        )


def _cmd_verify(run: _Run):
    cfg = run.cfg
    em, ps = _prepare(run)
    rows = []
    with run.stage("verify"):
        fb = OptimalFeedback(ps, cfg.x0)
        vr = verify_value(ps, cfg.market, cfg.sim, cfg.x0, feedback=fb)
        pr = duality_pairing_check(ps, em, cfg.market, cfg.sim, cfg.x0, feedback=fb)
    for c in vr.rows():
        rows.append(["value", c.name, c.mean, c.stderr, vr.target, c.z, c.passed])
    for c in pr.rows():
        rows.append(["pairing", c.name, c.mean, c.stderr, pr.target, c.z, c.passed])
    run.checks["verification"] = vr.passed
    run.checks["pairing"] = pr.passed
    run.table("verify.csv", ["check", "control", "mean", "stderr", "target", "z", "passed"], rows)


def _cmd_cvar(run: _Run):
    cfg = run.cfg
    em, _ = _prepare(run)
    pipe = Pipeline(cfg.utility, em, cfg.quad)
    with run.stage("frontier"):
        pts = frontier_sweep(CvarSpec(cfg.cvar_beta, 0.0, cfg.x0), cfg.cvar_lambdas, pipe, cfg.sim, cfg.sim.workers)
    run.checks["cvar_monotone"] = frontier_monotone(pts)
    run.table(
        "frontier.csv",
        ["lambda", "y_star", "value", "utility_mc", "cvar_mc", "var_mc", "se_utility", "se_cvar"],
        [[p.lam, p.y_star, p.value, p.utility_mc, p.cvar_mc, p.var_mc, p.se_utility, p.se_cvar] for p in pts],
    )


def _cmd_risk(run: _Run):
    cfg = run.cfg
    _, ps = _prepare(run)
    with run.stage("risk"):
        rep = monotonicity_report(ps, cfg.risk_t, cfg.risk_x)
    rows = []
    for i, t in enumerate(cfg.risk_t):
        for j, x in enumerate(cfg.risk_x):
            try:
                rs = float(static_risk_aversion(cfg.utility, float(x)))
            except CapabilityError:
                rs = "undefined"
            rows.append([t, x, rs, rep.dynamic[i, j], rep.static_direction, rep.dynamic_directions[i],
                         rep.static_direction in ("undefined", "mixed") or rep.dynamic_directions[i] == rep.static_direction])
    run.checks["risk_monotonicity"] = rep.preserved
    run.checks["w_curvature"] = rep.w_sign_ok
    run.checks["log_marginal"] = all(rep.log_marginal)
    run.diagnostics["violations"] = rep.violations
    run.table(
        "risk_profile.csv",
        ["t", "x", "R_static", "R_dynamic", "static_direction", "dynamic_direction", "preserved"],
        rows,
    )


def _cmd_selftest(run: _Run):
    """Closed-form oracle suite on the Merton market."""
    cfg = run.cfg
    rows = []

    def check(name, value, expected, err, tol):
        ok = bool(err <= tol)
        run.checks[name] = run.checks.get(name, True) and ok
        rows.append([name, value, expected, err, tol, ok])

    merton = build_config({**MERTON_SCENARIO, "seed": cfg.seed})
    with run.stage("merton"):
        em = EffectiveMarket.from_params(merton.market)
        ps = build_surface(merton.utility, em)
        tau0 = tau_profile(em, 0.0)
        for x in (0.1, 0.5, 1.0, 2.0, 5.0, 10.0):
            u = u_value(ps, 0.0, x)
            ex = math.sqrt(x) * math.exp(tau0)
            check(f"merton_u(x={x:g})", u, ex, abs(u / ex - 1.0), 1e-6)
        for t in (0.0, 0.5, 0.9):
            for x in (0.1, 1.0, 10.0):
                pi = float(optimal_control(ps, t, x).pi[0])
                check(f"merton_pi(t={t:g},x={x:g})", pi, 2.5, abs(pi - 2.5), 1e-6)
    with run.stage("quadrature"):
        for r in (0.5, 1.0, 2.0):
            ds = DualSurface(power_dual(r), em)
            for t in (0.0, 0.5):
                ys = np.geomspace(1e-2, 1e2, 9)
                ex = ys**-r * math.exp(r * (r + 1) * ds.tau(t))
                err = float(np.max(np.abs(hat_v(ds, t, ys) / ex - 1.0)))
                check(f"dual_power(r={r:g},t={t:g})", err, 0.0, err, 1e-8)
    with run.stage("market"):
        sol = solve_cone_qp([-1.0, 1.0], np.eye(2), ConeSpec.orthant(2))
        err = float(np.max(np.abs(sol.theta_hat - [0.0, 1.0])))
        check("cone_qp_orthant", sol.theta_hat[1], 1.0, err, 1e-10)
        two = EffectiveMarket.from_params(MarketParams([0.0, 0.5, 1.0], [[0.2], [0.4]], [0.4, 0.4], ConeSpec.whole(1)))
        tau = tau_profile(two, 0.0)
        check("tau_two_intervals", tau, 0.3125, abs(tau - 0.3125), 1e-12)
    with run.stage("cvar"):
        cv, var = cvar_var_of_sample([0.0, 1.0, 2.0, 3.0], 0.75)
        check("cvar_four_points", cv, 3.0, abs(cv - 3.0), 1e-12)
        check("var_four_points", var, 2.0, abs(var - 2.0), 1e-12)
    with run.stage("monte-carlo"):
        sim = SimConfig(paths=20_000, seed=cfg.seed, workers=cfg.sim.workers)
        fb = OptimalFeedback(ps, 1.0)
        vr = verify_value(ps, merton.market, sim, 1.0, feedback=fb)
        for c in vr.rows():
            rows.append([f"mc_value_{c.name}", c.mean, vr.target, c.z, 3.0, c.passed])
            run.checks[f"mc_value_{c.name}"] = c.passed
        pr = duality_pairing_check(ps, em, merton.market, sim, 1.0, feedback=fb)
        for c in pr.rows():
            rows.append([f"mc_pairing_{c.name}", c.mean, pr.target, c.z, 3.0, c.passed])
            run.checks[f"mc_pairing_{c.name}"] = c.passed
    run.table("selftest.csv", ["check", "value", "expected", "error", "tolerance", "passed"], rows)


_HANDLERS = {
    "solve-dual": _cmd_solve_dual,
    "solve-primal": _cmd_solve_primal,
    "control": _cmd_control,
    "simulate": _cmd_simulate,
    "verify": _cmd_verify,
    "cvar-frontier": _cmd_cvar,
    "risk-profile": _cmd_risk,
    "selftest": _cmd_selftest,
}


def run_subcommand(name: str, cfg: ScenarioConfig, out_dir: str | os.PathLike | None = None) -> tuple[int, _Run]:
    """Execute one subcommand and write its outputs; returns ``(exit_code, run)``."""
    if name not in _HANDLERS:
        raise UsageError(f"unknown subcommand {name!r}; choose from {', '.join(SUBCOMMANDS)}")
    run = _Run(name, cfg)
    _HANDLERS[name](run)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fname, text in run.files.items():
        (out / fname).write_text(text, encoding="utf-8")
    (out / "report.json").write_text(json.dumps(run.report(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    execution = {"stages": run.timings, "workers": cfg.sim.workers, "out": str(out)}
    (out / "timings.json").write_text(json.dumps(execution, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return (0 if run.passed else 2), run


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="scenario JSON file (env DUALHJB_CONFIG)")
    common.add_argument("--scenario", choices=("merton", "kinked"), help="built-in scenario used when no config is given")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed (env DUALHJB_SEED)")
    common.add_argument("--out", help="output directory (env DUALHJB_OUT)")
    common.add_argument("--workers", type=int, help="Monte Carlo worker threads (env DUALHJB_WORKERS)")
    p = _Parser(prog="dualhjb", description="Dual-route solver for constrained portfolio HJB problems.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=(_HANDLERS[name].__doc__ or name).strip().splitlines()[0])
    return p


def _env_int(name: str):
    v = os.environ.get(ENV_PREFIX + name)
    if v is None:
        return None
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"expected an integer, got {v!r}", ENV_PREFIX + name) from None


def resolve_config(args) -> ScenarioConfig:
    path = args.config or os.environ.get(ENV_PREFIX + "CONFIG")
    if path:
        cfg = load_config(path)
    else:
        cfg = build_config(KINKED_SCENARIO if args.scenario == "kinked" else MERTON_SCENARIO)
    seed = args.seed if args.seed is not None else _env_int("SEED")
    workers = args.workers if args.workers is not None else _env_int("WORKERS")
    out = args.out or os.environ.get(ENV_PREFIX + "OUT")
    if seed is not None or workers is not None or out is not None:
        cfg = cfg.with_overrides(seed, workers, out)
    return cfg


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
        code, run = run_subcommand(args.command, cfg)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DualHJBError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    failed = [k for k, v in run.checks.items() if not v]
    status = "PASS" if code == 0 else "FAIL"
    print(f"{args.command}: {status} ({len(run.checks) - len(failed)}/{len(run.checks)} checks)")
    for k in failed:
        print(f"  failed: {k}")
    return code


if __name__ == "__main__":
    sys.exit(main())

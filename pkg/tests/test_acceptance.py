"""The ten acceptance criteria, each checked literally at its stated tolerance.

Every test prints one ``C<k> PASS|FAIL`` line (also collected in the
terminal summary) and then asserts the same verdict.
"""

import json
import math
import time
import warnings

import numpy as np

from conftest import ACCEPTANCE, primal_solution
from screendual.cli import run
from screendual.dual import certify, dual_candidate, dual_value, gamma_residual
from screendual.fbp import (FBPOptions, OuterNotConverged, alpha_beta_residuals, blunt_ode_residual, blunt_profile,
                            default_seed, exclusion_boundary, exclusion_quadratic_residual, integrate_foliation,
                            rc_baseline_details, slope_el_residual, solve_free_boundary, zeta_integral)
from screendual.market import bunching_summary, ic_ir_check, simulate_market
from screendual.model import (Grid, ModelConfig, RangeTruncationWarning, ScalarField, evaluate_phi,
                              evaluate_phi_regularized, legendre_transform)
from screendual.primal import solve_primal_continuation
from test_fbp import _manufactured

SQ2 = math.sqrt(2)


def verdict(k: int, title: str, checks: dict, detail: str = "") -> None:
    failed = [name for name, ok in checks.items() if not ok]
    line = f"C{k:<2d} {'FAIL' if failed else 'PASS'}  {title}"
    if detail:
        line += f"  ({detail})"
    if failed:
        line += f"  failed: {'; '.join(failed)}"
    ACCEPTANCE[k] = line
    print(line)
    assert not failed, line


def _fbp_a0(n):
    """Free-boundary solve at a = 0 from the default seed; None with the trace when it does not converge."""
    opts = FBPOptions(n_grid=n)
    try:
        return solve_free_boundary(0.0, default_seed(0.0, opts.knots, opts.theta_bar), opts), None
    except OuterNotConverged as exc:
        return None, exc


def test_c1_exclusion_geometry():
    identity = max(abs(exclusion_quadratic_residual(a)) for a in (0.0, 0.5, 1.0, 2.0))
    t0 = time.perf_counter()
    cfg, u, rep = primal_solution(0.0, 64)
    elapsed = time.perf_counter() - t0
    runtime = max(elapsed, rep.wall_time)
    area = float(cfg.grid.trapezoid_weights()[u.values <= 1e-6].sum())
    verdict(1, "exclusion geometry", {
        "quadratic identity < 1e-12": identity < 1e-12,
        "zero-set area 1/3 +- 0.04": abs(area - 1 / 3) <= 0.04,
        "runtime < 60 s": runtime < 60,
    }, f"identity {identity:.1e}, area {area:.4f}, solve {runtime:.1f}s")


def test_c2_blunt_profile():
    t = np.linspace(exclusion_boundary(0.0), 2.0, 100)
    res = float(np.max(np.abs(blunt_ode_residual(t, 0.0))))
    cfg, u, _ = primal_solution(0.0, 64)
    s = 2 * cfg.grid.coords
    xb = exclusion_boundary(0.0)
    closed = np.where(s > xb, blunt_profile(np.maximum(s, xb), 0.0)[0], 0.0)
    err = np.abs(np.diag(u.values) - closed)
    sup = float(err.max())
    verdict(2, "blunt-profile ODE and diagonal trace", {
        "ODE residual < 1e-10": res < 1e-10,
        "diagonal sup error <= 10 h": sup <= 10 * cfg.h,
    }, f"residual {res:.1e}, diagonal sup {sup:.4f} at x1+x2 = {s[err.argmax()]:.3f} vs 10h = {10 * cfg.h:.4f}")


def test_c3_duality_sequence(primal32, primal64, primal128):
    gaps, r2s, phis = [], [], []
    for cfg, u, _ in (primal32, primal64, primal128):
        c = certify(u, cfg)
        gaps.append(c.gap)
        r2s.append(c.slackness_r2)
        phis.append(c.phi)
    decreasing = all(abs(gaps[k + 1]) <= 0.75 * abs(gaps[k]) for k in range(2)) and gaps[0] != 0
    r2_rate = all(abs(r2s[k + 1]) <= 0.75 * abs(r2s[k]) for k in range(2)) and r2s[0] != 0
    verdict(3, "duality gap sequence n = 32, 64, 128", {
        "gap >= -1e-8": min(gaps) >= -1e-8,
        "gap decreases >= 25% per doubling": decreasing,
        "slackness_r2 decreases at the same rate": r2_rate,
        "phi <= 1/3": max(phis) <= 1 / 3,
    }, "gap " + ", ".join(f"{g:.1e}" for g in gaps) + "; r2 " + ", ".join(f"{r:.1e}" for r in r2s)
       + "; phi " + ", ".join(f"{p:.5f}" for p in phis))


def test_c4_perturbed_duality(primal32):
    cfg, u_direct, rep_direct = primal32
    u, rep = solve_primal_continuation(cfg, [0.1, 0.01, 0.0])
    maxima = [s["phi_eps"] for s in rep.stages]
    # recompute each stage's objective from its own definition
    check = evaluate_phi_regularized(u, cfg, 0.0)
    diff = abs(evaluate_phi(u, cfg) - rep_direct.phi)
    verdict(4, "perturbed duality continuation", {
        "phi_eps maxima monotone in eps": maxima[0] <= maxima[1] <= maxima[2],
        "endpoint within 1e-4 of direct solve": diff <= 1e-4,
        "eps = 0 stage is the unregularized objective": abs(maxima[2] - check) <= 1e-12,
    }, "maxima " + ", ".join(f"{m:.6f}" for m in maxima) + f"; |endpoint - direct| {diff:.1e}")


def test_c5_foliation_ode():
    a, h_low = 0.5, 1.0
    R0 = (h_low - a) / SQ2
    fol = integrate_foliation(a, h_low, lambda th: R0 * np.exp(-(th + 0.25 * math.pi)), step=1e-3, clip=False)
    el = float(np.max(np.abs(slope_el_residual(fol))))
    alpha, beta = alpha_beta_residuals(fol, a)
    ab = float(max(np.max(np.abs(alpha)), np.max(np.abs(beta))))
    zeta = max(abs(zeta_integral(R)) for R in np.linspace(0.01, 1.4, 50))
    deg = integrate_foliation(0.0, 1.0, lambda th: np.zeros_like(th), step=1e-3)
    A = SQ2 * blunt_profile(1.0, 0.0)[1]
    closed = max(float(np.max(np.abs(deg.m - A * np.sin(deg.theta + 0.25 * math.pi)))),
                 float(np.max(np.abs(deg.h - 1.0))),
                 float(np.max(np.abs(deg.b - blunt_profile(1.0, 0.0)[0]))))
    verdict(5, "foliation ODE", {
        "slope E-L <= 1e-6": el <= 1e-6,
        "alpha, beta <= 1e-6": ab <= 1e-6,
        "zeta identity <= 1e-12": zeta <= 1e-12,
        "degenerate R = 0 closed form <= 1e-10": closed <= 1e-10,
    }, f"E-L {el:.1e}, alpha/beta {ab:.1e}, zeta {zeta:.1e}, R=0 {closed:.1e}")


def test_c6_poisson_order():
    errs = []
    for n in (17, 33, 65, 129):
        g, sol, exact, _ = _manufactured(n)
        X1, X2 = g.mesh()
        errs.append(float(np.nanmax(np.abs(sol.values - exact(X1, X2)))))
    ratios = [errs[k] / errs[k + 1] for k in range(3)]
    verdict(6, "mixed Poisson solver order", {
        "ratio in [3.5, 4.5] per halving": all(3.5 <= r <= 4.5 for r in ratios),
    }, "ratios " + ", ".join(f"{r:.2f}" for r in ratios))


def test_c7_free_boundary_matching(tmp_path):
    n = 64
    cfg = ModelConfig(a=0.0, n_grid=n)
    rc = rc_baseline_details(0.0, cfg)
    rc_mis = min(r.max_mismatch for r in rc.values())
    res, exc = _fbp_a0(n)
    if res is not None:
        fb = float(res.report["max_mismatch"])
        P = res.geometry.interface
        c = P.mean(axis=0)
        _, _, vt = np.linalg.svd(P - c)
        dev = float(np.max(np.abs((P - c) @ vt[1])))
        verdict(7, "free-boundary matching", {
            "rc mismatch >= 10 x free-boundary mismatch": rc_mis >= 10 * fb,
            "free-boundary mismatch <= 1e-3": fb <= 1e-3,
            "interface off its best-fit line by > 3 h": dev > 3 * cfg.h,
        }, f"rc {rc_mis:.3e}, fbp {fb:.3e}, interface deviation {dev:.4f}")
        return
    # the outer iteration did not converge: the run must say so with exit 3 and a residual trace
    cfg_path = tmp_path / "a0.json"
    cfg_path.write_text(json.dumps({"model": {"a": 0.0, "n_grid": n}}))
    code = run("solve-analytic", cfg_path, tmp_path / "out")
    rep = json.loads((tmp_path / "out" / "fbp_report.json").read_text())
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    verdict(7, "free-boundary matching", {
        "non-convergence exits with status 3": code == 3 and manifest["exit_code"] == 3,
        "report carries a residual trace": rep["status"] == "OuterNotConverged" and len(rep["trace"]) > 0,
        "in-process solve raised OuterNotConverged with the same trace": bool(exc.trace),
    }, "contingency branch: outer iteration did not converge at a = 0 "
       f"[{rep['trace'][0].get('error', 'no error text')}]; rc max mismatch {rc_mis:.3f} recorded")


def test_c8_cross_route_agreement(primal64):
    cfg, u_p, rep_p = primal64
    res, exc = _fbp_a0(64)
    if res is None:
        verdict(8, "cross-route agreement", {"free-boundary solution available at a = 0": False},
                f"OuterNotConverged: {exc}")
        return
    u_f = res.field
    sup = float(np.max(np.abs(u_f.values - u_p.values)))
    dphi = abs(evaluate_phi(u_f, cfg, math.inf) - rep_p.phi)
    gap = certify(u_f, cfg).gap
    verdict(8, "cross-route agreement", {
        "sup |u_fbp - u_primal| <= 10 h": sup <= 10 * cfg.h,
        "|phi difference| <= 5 h": dphi <= 5 * cfg.h,
        "certify(u_fbp) gap <= 5 h": gap <= 5 * cfg.h,
    }, f"sup {sup:.4f}, dphi {dphi:.1e}, gap {gap:.1e}")


def test_c9_market_replay(primal64):
    cfg, u, _ = primal64
    h = cfg.h
    out = simulate_market(u, cfg)
    icir = ic_ir_check(out, pairs=10_000)
    b = bunching_summary(out)
    verdict(9, "market replay", {
        "|profit - phi| <= 20 h": abs(out.profit - out.phi) <= 20 * h,
        "exclusion fraction 1/3 +- 3 h": abs(out.exclusion_fraction - 1 / 3) <= 3 * h,
        "bunched products carry positive mass": b["n_bunched_products"] > 0 and b["min_bunched_mass"] > 0,
        "IC on 1e4 random pairs": icir["ic_ok"] and icir["pairs"] == 10_000,
        "IR on all agents": icir["ir_ok"],
    }, f"|profit - phi| {abs(out.profit - out.phi):.1e}, exclusion {out.exclusion_fraction:.4f}, "
       f"{b['n_bunched_products']} bunched products, worst IC gain {icir['worst_ic_gain']:.1e}")


def test_c10_invariant_suites(primal32, primal64, primal128):
    t0 = time.perf_counter()
    checks = {}
    sols = (primal32, primal64, primal128)
    checks["nonnegativity, monotonicity, convexity predicates"] = all(
        u.admissibility().admissible for _, u, _ in sols)
    checks["x1 <-> x2 symmetry <= 1e-6"] = all(
        np.max(np.abs(u.values - u.values.T)) <= 1e-6 for _, u, _ in sols)
    cfg, u, _ = primal64
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RangeTruncationWarning)
        v = legendre_transform(u, Grid(0.0, 2 * cfg.n_grid - 1, 2.0))
        uu = legendre_transform(v, cfg.grid)
    round_trip = float(np.max(np.abs(uu.values - u.values)))
    checks["Legendre biconjugate round trip <= 2 h"] = round_trip <= 2 * cfg.h
    checks["biconjugate below the field"] = bool(np.all(uu.values <= u.values + 1e-12))
    rng = np.random.default_rng(2024)
    c33 = ModelConfig(n_grid=33)
    X1, X2 = c33.grid.mesh()
    pairs, ordered = 0, True
    for _ in range(40):
        p = rng.uniform(0, 1.5, 2)
        uf = ScalarField(c33.grid, rng.uniform(0.2, 1) * np.maximum(0, p[0] * X1 + p[1] * X2 - rng.uniform(0, 1)) ** 2)
        vf = ScalarField(c33.grid, rng.uniform(0.1, 0.8) * (X1 + rng.uniform(0, 1) * X2) ** 2)
        G = dual_candidate(vf, c33)
        if gamma_residual(G, c33, [uf]) <= 0:
            pairs += 1
            ordered &= evaluate_phi(uf, c33) <= dual_value(G, c33) + 1e-8
    checks["weak-duality ordering on random feasible pairs"] = ordered and pairs >= 5
    elapsed = time.perf_counter() - t0 + sum(r.wall_time for _, _, r in sols)
    checks["total < 5 min"] = elapsed < 300
    verdict(10, "invariant suites", checks,
            f"round trip {round_trip:.1e}, {pairs} feasible pairs, {elapsed:.0f}s including the three solves")

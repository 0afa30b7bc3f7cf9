"""Command-line front end: ``screendual <subcommand> --config run.json``.

Exit status 0 on success, 2 on configuration errors, 3 when a solver does
not converge (artifacts are still written, with their status).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from .dual import certify
from .fbp import D_GUARD, FBPOptions, OuterNotConverged, default_seed, rc_baseline_details, solve_free_boundary
from .market import TIE_TOL, bunching_summary, ic_ir_check, simulate_market
from .model import ModelConfig, cost_from_name, evaluate_phi, read_scalar_csv, write_scalar_csv, write_vector_csv
from .parallel import thread_count
from .primal import PrimalOptions, solve_primal, solve_primal_continuation
from .region import RegionThresholds, classify_regions, extract_bunches, hessian, segments_to_json

SUBCOMMANDS = ("solve-primal", "solve-analytic", "certify", "compare", "simulate-market", "rc-baseline",
               "export-plots")

DEFAULTS = {
    "model": {"a": 0.0, "n_grid": 32, "cost": "quadratic"},
    "primal": {"w_stencil": 2, "max_iter": 20000, "tol_feas": 1e-8, "tol_stat": 1e-7, "rho": 0.1,
               "seed": 0, "eps_schedule": None},
    "dual": {"tol_gamma": 1e-7},
    "region": {"tau_rank": None, "tau_angle_deg": 3.0},
    "fbp": {"tol_match": 1e-3, "step": 1e-3, "knots": 12, "theta_bar": 0.5 * math.pi, "max_outer": 30,
            "samples": 24},
    "market": {"tol_bilevel": None, "ic_pairs": 10000},
    "input": {"field": None},
    "output_dir": "screendual-out",
}

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_int = {"type": "integer"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {"type": "object", "additionalProperties": False, "properties": {
            "a": {"type": "number", "minimum": 0},
            "n_grid": {"type": "integer", "minimum": 8},
            "cost": {"enum": ["quadratic", "quartic"]}}},
        "primal": {"type": "object", "additionalProperties": False, "properties": {
            "w_stencil": {"enum": [1, 2, 3]}, "max_iter": {"type": "integer", "minimum": 1},
            "tol_feas": _num, "tol_stat": _num, "rho": _num, "seed": _int,
            "eps_schedule": {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}}}},
        "dual": {"type": "object", "additionalProperties": False, "properties": {"tol_gamma": _num}},
        "region": {"type": "object", "additionalProperties": False, "properties": {
            "tau_rank": _opt_num, "tau_angle_deg": _num}},
        "fbp": {"type": "object", "additionalProperties": False, "properties": {
            "tol_match": _num, "step": {"type": "number", "exclusiveMinimum": 0},
            "knots": {"type": "integer", "minimum": 3}, "theta_bar": _num,
            "max_outer": {"type": "integer", "minimum": 0}, "samples": {"type": "integer", "minimum": 2}}},
        "market": {"type": "object", "additionalProperties": False, "properties": {
            "tol_bilevel": _opt_num, "ic_pairs": {"type": "integer", "minimum": 1}}},
        "input": {"type": "object", "additionalProperties": False, "properties": {
            "field": {"type": ["string", "null"]}}},
        "output_dir": {"type": "string"},
    },
}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    """Read, validate and fill defaults; raises ConfigError."""
    try:
        raw = json.loads(Path(path).read_text()) if path is not None else {}
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message}") from exc
    cfg = copy.deepcopy(DEFAULTS)
    for key, val in raw.items():
        if isinstance(val, dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    eps = cfg["primal"]["eps_schedule"]
    if eps is not None and (not eps or eps[-1] != 0 or any(b >= a for a, b in zip(eps, eps[1:]))):
        raise ConfigError("primal.eps_schedule must be strictly decreasing and end at 0")
    return cfg


def _model(cfg) -> ModelConfig:
    m = cfg["model"]
    try:
        return ModelConfig(a=float(m["a"]), n_grid=int(m["n_grid"]), cost=cost_from_name(m["cost"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _primal_opts(cfg) -> PrimalOptions:
    p = cfg["primal"]
    return PrimalOptions(w_stencil=p["w_stencil"], max_iter=p["max_iter"], tol_feas=p["tol_feas"],
                         tol_stat=p["tol_stat"], rho=p["rho"], seed=p["seed"])


def _fbp_opts(cfg) -> FBPOptions:
    f = cfg["fbp"]
    return FBPOptions(n_grid=cfg["model"]["n_grid"], knots=f["knots"], step=f["step"], tol_match=f["tol_match"],
                      theta_bar=f["theta_bar"], max_outer=f["max_outer"], samples=f["samples"])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


class Run:
    """Per-invocation state: output directory, artifact list, timings and status."""

    def __init__(self, cfg, subcommand):
        self.cfg = cfg
        self.subcommand = subcommand
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self.timings: dict = {}
        self.status = "ok"
        self.notes: dict = {}

    def path(self, name) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def timed(self, key, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        finally:
            self.timings[key] = time.perf_counter() - t0

    def tolerances(self) -> dict:
        """Every tolerance a subcommand can consult, with defaults resolved."""
        cfg = self.cfg
        h = 1.0 / (cfg["model"]["n_grid"] - 1)
        r = cfg["region"]
        tol_bilevel = cfg["market"]["tol_bilevel"]
        return {
            "primal": asdict(_primal_opts(cfg)),
            "dual": {"tol_gamma": cfg["dual"]["tol_gamma"]},
            "region": {"tau_rank": RegionThresholds(r["tau_rank"]).rank_tol(h), "tau_angle_deg": r["tau_angle_deg"],
                       "tau_bunch": 10 * h},
            "fbp": {**asdict(_fbp_opts(cfg)), "singularity_guard": D_GUARD},
            "market": {"tol_bilevel": 20 * h if tol_bilevel is None else tol_bilevel, "tie_tol": TIE_TOL},
            "model": {"tol_cone": 1e-6},
        }

    def manifest(self, exit_code: int) -> None:
        _write_json(self.out / "manifest.json", {
            "subcommand": self.subcommand,
            "config": self.cfg,
            "versions": {"screendual": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__},
            "seeds": {"primal": self.cfg["primal"]["seed"], "ic_ir_pairs": self.cfg["primal"]["seed"]},
            "threads": thread_count(),
            "timings": self.timings,
            "tolerances": self.tolerances(),
            "status": self.status,
            "exit_code": exit_code,
            "artifacts": sorted(set(self.artifacts)),
            "notes": self.notes,
        })


# ------------------------------------------------------------------ commands


def _solve_primal(run: Run):
    cfg = run.cfg
    model = _model(cfg)
    opts = _primal_opts(cfg)
    eps = cfg["primal"]["eps_schedule"]
    if eps:
        u, rep = run.timed("solve_primal", solve_primal_continuation, model, eps, opts)
    else:
        u, rep = run.timed("solve_primal", solve_primal, model, opts)
    return model, u, rep


def _field(run: Run):
    """Input field if configured, otherwise a primal solve; returns (model, u, converged)."""
    path = run.cfg["input"]["field"]
    if path:
        try:
            u = read_scalar_csv(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read input field: {exc}") from exc
        model = _model(run.cfg)
        if u.grid != model.grid:
            raise ConfigError("input field grid does not match model.a / model.n_grid")
        return model, u, True
    model, u, rep = _solve_primal(run)
    run.notes["primal_status"] = rep.status
    return model, u, rep.status == "Converged"


def cmd_solve_primal(run: Run) -> int:
    model, u, rep = _solve_primal(run)
    write_scalar_csv(u, run.path("u_primal.csv"))
    d = json.loads(rep.to_json())
    d.pop("wall_time", None)           # timings live in the manifest so artifacts stay reproducible
    _write_json(run.path("solve_report.json"), d)
    run.status = rep.status
    return 0 if rep.status == "Converged" else 3


def _analytic(run: Run):
    a = float(run.cfg["model"]["a"])
    opts = _fbp_opts(run.cfg)
    init = default_seed(a, opts.knots, opts.theta_bar)
    try:
        res = run.timed("solve_free_boundary", solve_free_boundary, a, init, opts)
    except OuterNotConverged as exc:
        return None, {"status": "OuterNotConverged", "message": str(exc), "trace": exc.trace, "best": exc.best}
    return res, res.report


def cmd_solve_analytic(run: Run) -> int:
    res, report = _analytic(run)
    _write_json(run.path("fbp_report.json"), report)
    if res is None:
        run.status = "OuterNotConverged"
        return 3
    write_scalar_csv(res.field, run.path("u_fbp.csv"))
    run.path("foliation.json").write_text(res.foliation.to_json() + "\n")
    res.geometry.write_csv(run.path("geometry.csv"))
    run.status = "Converged"
    return 0


def cmd_certify(run: Run) -> int:
    model, u, ok = _field(run)
    cert = run.timed("certify", certify, u, model, tol_gamma=run.cfg["dual"]["tol_gamma"])
    _write_json(run.path("certificate.json"), cert.to_dict())
    write_vector_csv(cert.G, run.path("G.csv"))
    run.status = "certified" if cert.certified else "not certified"
    return 0 if ok else 3


def _compare_row(route, status, u, model, mismatch) -> dict:
    # the certificate needs an admissible field; others get their value only
    ok = u.admissibility().admissible
    return {"route": route, "status": status, "admissible": ok, "phi": evaluate_phi(u, model, math.inf),
            "gap": certify(u, model).gap if ok else None, "mismatch": mismatch}


def cmd_compare(run: Run) -> int:
    model, u, rep = _solve_primal(run)
    rows = [_compare_row("primal", rep.status, u, model, None)]
    res, report = _analytic(run)
    if res is None:
        rows.append({"route": "analytic", "status": report["status"], "admissible": None, "phi": None, "gap": None,
                     "mismatch": (report["trace"][-1].get("max_mismatch") if report["trace"] else None)})
    else:
        rows.append(_compare_row("analytic", "Converged", res.field, model, report["max_mismatch"]))
    for name, r in run.timed("rc_baseline", rc_baseline_details, model.a, model).items():
        rows.append(_compare_row(f"rc-baseline:{name}", "evaluated", r.field, model, r.max_mismatch))
    _write_json(run.path("compare.json"), {"a": model.a, "n_grid": model.n_grid, "rows": rows})
    bad = rep.status != "Converged" or res is None
    run.status = "incomplete" if bad else "ok"
    return 3 if bad else 0


def cmd_simulate_market(run: Run) -> int:
    model, u, ok = _field(run)
    out = run.timed("simulate_market", simulate_market, u, model)
    tol = run.cfg["market"]["tol_bilevel"]
    tol = 20 * model.h if tol is None else tol
    d = out.to_dict()
    d["tol_bilevel"] = tol
    d["bilevel_consistent"] = bool(abs(out.profit - out.phi) <= tol)
    d["ic_ir"] = ic_ir_check(out, run.cfg["market"]["ic_pairs"], seed=run.cfg["primal"]["seed"])
    b = bunching_summary(out)
    d["bunching"] = {k: b[k] for k in ("n_bunched_products", "bunched_mass", "min_bunched_mass")}
    _write_json(run.path("market.json"), d)
    out.write_histogram_csv(run.path("histogram.csv"))
    return 0 if ok else 3


def cmd_rc_baseline(run: Run) -> int:
    model = _model(run.cfg)
    out = run.timed("rc_baseline", rc_baseline_details, model.a, model)
    _write_json(run.path("rc_report.json"), {"a": model.a, "n_grid": model.n_grid,
                                              "interpretations": {k: v.to_dict() for k, v in out.items()}})
    for k, v in out.items():
        write_scalar_csv(v.field, run.path(f"u_rc_{k}.csv"))
    return 0


def _fmt(v) -> str:
    return format(float(v), ".17g")


def cmd_export_plots(run: Run) -> int:
    model, u, ok = _field(run)
    uxx, uyy, uxy = hessian(u)
    det = uxx * uyy - uxy**2
    X1, X2 = u.grid.mesh()
    with open(run.path("det_hessian.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "det_hessian"])
        for a_, b_, c_ in zip(X1.ravel(), X2.ravel(), det.ravel()):
            w.writerow([_fmt(a_), _fmt(b_), _fmt(c_)])
    r = run.cfg["region"]
    mask = classify_regions(u, RegionThresholds(r["tau_rank"], r["tau_angle_deg"]))
    mask.write_csv(run.path("regions.csv"))
    run.path("bunches.json").write_text(segments_to_json(extract_bunches(u, mask)) + "\n")
    out = simulate_market(u, model)
    out.write_histogram_csv(run.path("histogram.csv"))
    write_scalar_csv(u, run.path("u.csv"))
    return 0 if ok else 3


COMMANDS = {
    "solve-primal": cmd_solve_primal,
    "solve-analytic": cmd_solve_analytic,
    "certify": cmd_certify,
    "compare": cmd_compare,
    "simulate-market": cmd_simulate_market,
    "rc-baseline": cmd_rc_baseline,
    "export-plots": cmd_export_plots,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="screendual", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON run configuration (defaults are used for missing keys)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    return p


def run(subcommand: str, config_path=None, out=None) -> int:
    try:
        cfg = load_config(config_path)
        if out is not None:
            cfg["output_dir"] = str(out)
        r = Run(cfg, subcommand)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        code = COMMANDS[subcommand](r)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        r.status = "config error"
        code = 2
    r.manifest(code)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.config, args.out)


if __name__ == "__main__":
    sys.exit(main())

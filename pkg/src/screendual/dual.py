"""Dual candidates, the dual objective and sampled Gamma-membership certificates.

Every integral here uses the same cell-corner quadrature as
:func:`screendual.model.evaluate_phi`, so for a field ``u`` and
``G = dual_candidate(u)`` the identity ``gap = -slackness_r2`` holds to
rounding error (Fenchel equality at every quadrature point).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import (ModelConfig, ScalarField, VectorField, corner_gradient, evaluate_phi)
from .parallel import thread_count


@dataclass(frozen=True, eq=False)
class TestFunction:
    """A named member of the Gamma test family."""

    __test__ = False        # not a pytest class despite the name

    name: str
    field: ScalarField


@dataclass
class DualCertificate:
    G: VectorField
    phi: float
    dual_value: float
    gap: float
    gamma_residual: float
    worst_test: str
    slackness_r1: float
    slackness_r2: float
    test_family_size: int
    tol_gamma: float
    certified: bool
    kind: str = "sampled"
    family_description: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "phi": self.phi,
            "dual_value": self.dual_value,
            "gap": self.gap,
            "gamma_residual": self.gamma_residual,
            "worst_test": self.worst_test,
            "slackness_r1": self.slackness_r1,
            "slackness_r2": self.slackness_r2,
            "test_family_size": self.test_family_size,
            "tol_gamma": self.tol_gamma,
            "certified": self.certified,
            "kind": self.kind,
            "family": self.family_description,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def dual_candidate(u: ScalarField, cfg: ModelConfig, layout: str = "corner") -> VectorField:
    """G = Dc(Du).

    With ``layout="corner"`` (default) G lives on the quadrature points of Phi;
    ``layout="node"`` uses the centred nodal gradient instead.
    """
    if layout == "corner":
        g = corner_gradient(u).values
    elif layout == "node":
        from .model import gradient

        g = gradient(u).values
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return VectorField(u.grid, cfg.cost.dc(g), layout)


def _corner_weights(cfg: ModelConfig):
    return cfg.corner_weights()


def dual_value(G: VectorField, cfg: ModelConfig) -> float:
    """<c* o G>_f by the quadrature matching the layout of G."""
    if G.grid != cfg.grid:
        raise ValueError("field grid does not match the configuration")
    if G.layout == "corner":
        return float(np.sum(_corner_weights(cfg) * cfg.cost.cstar(G.values)))
    return float(np.sum(cfg.node_weights() * cfg.cost.cstar(G.values)))


def gamma_functional(G: VectorField, cfg: ModelConfig, u: ScalarField, eps: float = 0.0) -> float:
    """int (x.Du - u - G.Du) f dx - eps <|Du|^2>^(1/2) for a single test field."""
    g = corner_gradient(u).values
    Gc = G.at_corners()
    w = _corner_weights(cfg)
    q1, q2 = cfg.grid.corner_coords()
    uc = cfg.grid.to_corners(u.values)
    val = float(np.sum(w * ((q1 - Gc[..., 0]) * g[..., 0] + (q2 - Gc[..., 1]) * g[..., 1] - uc)))
    if eps:
        val -= eps * math.sqrt(float(np.sum(w * np.sum(g * g, axis=-1))))
    return val


def gamma_residuals(G: VectorField, cfg: ModelConfig, test_family: Sequence, eps: float = 0.0):
    """Residual of every family member (fields or :class:`TestFunction`)."""
    fields = [t.field if isinstance(t, TestFunction) else t for t in test_family]
    if not fields:
        return np.zeros(0)
    workers = thread_count()
    if workers > 1 and len(fields) > 8:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            vals = list(ex.map(lambda f: gamma_functional(G, cfg, f, eps), fields))
    else:
        vals = [gamma_functional(G, cfg, f, eps) for f in fields]
    return np.asarray(vals)


def gamma_residual(G: VectorField, cfg: ModelConfig, test_family: Sequence, eps: float = 0.0) -> float:
    """Maximum of the Gamma functional over the family; <= tol certifies membership for this family only."""
    r = gamma_residuals(G, cfg, test_family, eps)
    return float(r.max()) if r.size else -math.inf


def default_test_family(u: Optional[ScalarField], cfg: ModelConfig, slopes: Sequence[float] = (0.0, 0.5, 1.0, 2.0),
                        offsets: int = 9, scalings: Sequence[float] = (0.5, 2.0)) -> list:
    """Candidate, its scalings, hinges max(0, p.x - q) on a lattice, and coordinate ramps."""
    grid = cfg.grid
    X1, X2 = grid.mesh()
    fam: list[TestFunction] = []
    if u is not None:
        fam.append(TestFunction("candidate", u))
        for s in scalings:
            fam.append(TestFunction(f"candidate*{s:g}", ScalarField(grid, s * u.values)))
    fam.append(TestFunction("ramp_x1", ScalarField(grid, X1 - cfg.a)))
    fam.append(TestFunction("ramp_x2", ScalarField(grid, X2 - cfg.a)))
    fam.append(TestFunction("constant", ScalarField(grid, np.ones_like(X1))))
    for p1 in slopes:
        for p2 in slopes:
            if p1 == 0 and p2 == 0:
                continue
            lo = p1 * cfg.a + p2 * cfg.a
            hi = p1 * (cfg.a + 1) + p2 * (cfg.a + 1)
            for q in np.linspace(lo, hi, offsets)[:-1]:
                vals = np.maximum(0.0, p1 * X1 + p2 * X2 - q)
                fam.append(TestFunction(f"hinge({p1:g},{p2:g};{q:.6g})", ScalarField(grid, vals)))
    return fam


def certify(u: ScalarField, cfg: ModelConfig, test_family: Optional[Sequence] = None,
            tol_gamma: float = 1e-7, eps: float = 0.0) -> DualCertificate:
    """Build G = Dc(Du) and report dual value, gap, sampled Gamma residual and slackness."""
    G = dual_candidate(u, cfg)
    phi = evaluate_phi(u, cfg)
    dv = dual_value(G, cfg)
    fam = list(test_family) if test_family is not None else default_test_family(u, cfg)
    res = gamma_residuals(G, cfg, fam, eps)
    k = int(np.argmax(res)) if res.size else -1
    worst = (fam[k].name if isinstance(fam[k], TestFunction) else f"member {k}") if k >= 0 else ""
    gmax = float(res[k]) if k >= 0 else -math.inf
    g = corner_gradient(u).values
    w = _corner_weights(cfg)
    diff = G.values - cfg.cost.dc(g)
    r1 = math.sqrt(float(np.sum(w * np.sum(diff * diff, axis=-1))))
    r2 = gamma_functional(G, cfg, u)
    certified = gmax <= tol_gamma
    desc = {"size": len(fam), "members": [t.name if isinstance(t, TestFunction) else "field" for t in fam[:5]]
            + (["..."] if len(fam) > 5 else [])}
    return DualCertificate(G=G, phi=phi, dual_value=dv, gap=dv - phi, gamma_residual=gmax, worst_test=worst,
                           slackness_r1=r1, slackness_r2=r2, test_family_size=len(fam), tol_gamma=tol_gamma,
                           certified=certified, family_description=desc)

"""Discrete maximization of Phi over the convex cone of admissible payoffs.

The feasible set is cut out by homogeneous linear inequalities (nonnegativity,
forward-difference monotonicity, wide-stencil convexity).  The maximization is
carried out by an operator-splitting (ADMM) iteration in the form popularized
by OSQP: a prefactored linear solve for the smooth part, a projection onto the
nonnegative orthant for the constraint block and, for the perturbed objective,
block soft-thresholding for the norm term.  The final iterate is polished on
its active set, repaired so that every constraint holds to ``tol_feas`` and
rescaled along its ray, which can only raise Phi.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import (CORNERS, ModelConfig, ScalarField, evaluate_phi_regularized,
                    stencil_directions)


class NotConverged(RuntimeError):
    """Raised by callers that insist on convergence; carries the best iterate."""

    def __init__(self, message, u=None, report=None):
        super().__init__(message)
        self.u = u
        self.report = report


# ------------------------------------------------------------------ constraints


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Rows of ``A`` with ``A @ u >= 0``; ``kinds`` labels each row."""

    A: sp.csr_matrix
    kinds: np.ndarray
    directions: tuple
    w_stencil: int

    @property
    def counts(self) -> dict:
        labels, num = np.unique(self.kinds, return_counts=True)
        return {str(k): int(c) for k, c in zip(labels, num)}

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def violation(self, u: np.ndarray) -> float:
        """Largest violation max(0, -A u) over all rows."""
        return float(max(0.0, -(self.A @ np.ravel(u)).min()))

    def violation_by_kind(self, u: np.ndarray) -> dict:
        r = self.A @ np.ravel(u)
        return {str(k): float(max(0.0, -r[self.kinds == k].min())) for k in np.unique(self.kinds)}


def _rows(idx_triplets, coeffs, ncols):
    m = len(idx_triplets)
    if m == 0:
        return sp.csr_matrix((0, ncols))
    cols = np.asarray(idx_triplets).reshape(m, -1)
    k = cols.shape[1]
    data = np.tile(coeffs, m)
    return sp.csr_matrix((data, (np.repeat(np.arange(m), k), cols.ravel())), shape=(m, ncols))


def assemble_constraints(cfg: ModelConfig, w_stencil: int = 2) -> ConstraintSet:
    """Nonnegativity, forward monotonicity in x1 and x2, then convexity by direction."""
    n = cfg.n_grid
    N = n * n
    idx = np.arange(N).reshape(n, n)
    blocks = [sp.identity(N, format="csr")]
    kinds = ["nonneg"] * N
    m1 = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    m2 = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    blocks += [_rows(m1, [-1.0, 1.0], N), _rows(m2, [-1.0, 1.0], N)]
    kinds += ["mono_x1"] * len(m1) + ["mono_x2"] * len(m2)
    dirs = stencil_directions(w_stencil)
    for p, q in dirs:
        ap, aq = abs(p), abs(q)
        if 2 * ap >= n or 2 * aq >= n:
            continue
        c = idx[ap:n - ap, aq:n - aq]
        plus = idx[ap + p:n - ap + p, aq + q:n - aq + q]
        minus = idx[ap - p:n - ap - p, aq - q:n - aq - q]
        trip = np.stack([minus.ravel(), c.ravel(), plus.ravel()], axis=1)
        blocks.append(_rows(trip, [1.0, -2.0, 1.0], N))
        kinds += [f"convex_{p}_{q}"] * len(trip)
    A = sp.vstack(blocks, format="csr")
    return ConstraintSet(A, np.array(kinds), tuple(dirs), w_stencil)


# --------------------------------------------------------------- discrete Phi


@dataclass(frozen=True, eq=False)
class PhiOperators:
    """Sparse pieces of the discrete objective.

    ``G1[k]``, ``G2[k]`` map node values to corner-k gradients of every cell,
    ``S[k]`` picks the corner-k node value, ``w[k]`` are the quadrature weights.
    For any cost: Phi(u) = lin @ u - sum_k w[k] . c(G1[k] u, G2[k] u).
    """

    G1: tuple
    G2: tuple
    w: tuple
    lin: np.ndarray
    K: sp.csr_matrix      # Hessian of the quadratic-cost term sum w |g|^2 / 2
    B: sp.csr_matrix      # stacked sqrt(w) gradients, |B u|^2 = <|Du|^2>

    def gradients(self, u):
        return [(g1 @ u, g2 @ u) for g1, g2 in zip(self.G1, self.G2)]


def phi_operators(cfg: ModelConfig) -> PhiOperators:
    n = cfg.n_grid
    N = n * n
    h = cfg.h
    idx = np.arange(N).reshape(n, n)
    X1, X2 = cfg.grid.mesh()
    f = cfg.density_nodes()
    G1, G2, W = [], [], []
    lin = np.zeros(N)
    rows = (n - 1) * (n - 1)
    r = np.arange(rows)
    for di, dj in CORNERS:
        a0 = idx[:-1, dj:n - 1 + dj].ravel()
        a1 = idx[1:, dj:n - 1 + dj].ravel()
        b0 = idx[di:n - 1 + di, :-1].ravel()
        b1 = idx[di:n - 1 + di, 1:].ravel()
        g1 = sp.csr_matrix((np.r_[-np.ones(rows), np.ones(rows)] / h, (np.r_[r, r], np.r_[a0, a1])),
                           shape=(rows, N))
        g2 = sp.csr_matrix((np.r_[-np.ones(rows), np.ones(rows)] / h, (np.r_[r, r], np.r_[b0, b1])),
                           shape=(rows, N))
        node = idx[di:n - 1 + di, dj:n - 1 + dj].ravel()
        w = 0.25 * h * h * f.ravel()[node]
        x1 = X1.ravel()[node]
        x2 = X2.ravel()[node]
        lin += g1.T @ (w * x1) + g2.T @ (w * x2)
        np.subtract.at(lin, node, w)
        G1.append(g1)
        G2.append(g2)
        W.append(w)
    sq = [sp.diags(np.sqrt(w)) for w in W]
    B = sp.vstack([s @ g for s, g in zip(sq, G1)] + [s @ g for s, g in zip(sq, G2)], format="csr")
    K = (B.T @ B).tocsr()
    return PhiOperators(tuple(G1), tuple(G2), tuple(W), lin, K, B)


def _phi_value(ops: PhiOperators, cost, u: np.ndarray, eps: float = 0.0) -> float:
    val = float(ops.lin @ u)
    sq = 0.0
    for (g1, g2), w in zip(ops.gradients(u), ops.w):
        g = np.maximum(np.stack([g1, g2], axis=-1), 0.0)
        val -= float(w @ cost.c(g))
        sq += float(w @ (g1 * g1 + g2 * g2))
    return val - eps * math.sqrt(sq)


def _phi_grad_hess(ops: PhiOperators, cost, u: np.ndarray):
    """Gradient of sum w c(g) and its Hessian as a sparse matrix."""
    grad = np.zeros_like(u)
    H = None
    for g1op, g2op, w in zip(ops.G1, ops.G2, ops.w):
        g = np.stack([g1op @ u, g2op @ u], axis=-1)
        d = cost.dc(g)
        grad += g1op.T @ (w * d[:, 0]) + g2op.T @ (w * d[:, 1])
        hs = cost.hess(g)
        blk = (g1op.T @ sp.diags(w * hs[:, 0, 0]) @ g1op + g2op.T @ sp.diags(w * hs[:, 1, 1]) @ g2op
               + g1op.T @ sp.diags(w * hs[:, 0, 1]) @ g2op + g2op.T @ sp.diags(w * hs[:, 1, 0]) @ g1op)
        H = blk if H is None else H + blk
    return grad, H.tocsc()


# ----------------------------------------------------------------------- options


@dataclass(frozen=True)
class PrimalOptions:
    w_stencil: int = 2
    max_iter: int = 20000
    tol_feas: float = 1e-8
    tol_stat: float = 1e-7
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    check_every: int = 25
    adaptive_rho: bool = True
    polish: bool = True
    seed: int = 0
    init: Optional[str] = "guess"   # "guess" or "zero"
    eps: float = 0.0
    newton_steps: int = 8


@dataclass
class SolveReport:
    status: str
    iterations: int
    phi: float
    max_violation: float
    violation_by_kind: dict
    stationarity: float
    primal_residual: float
    polished: bool
    rescale: float
    step_history: list = field(default_factory=list)
    phi_history: list = field(default_factory=list)
    wall_time: float = 0.0
    n_grid: int = 0
    a: float = 0.0
    w_stencil: int = 2
    constraint_counts: dict = field(default_factory=dict)
    eps: float = 0.0
    stages: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# ----------------------------------------------------------------------- solver


def initial_guess(cfg: ModelConfig) -> np.ndarray:
    """max(0, x1 + x2 - a - xbar)^2 / 4 with the exclusion intercept of the fbp module."""
    from .fbp import exclusion_boundary

    X1, X2 = cfg.grid.mesh()
    t = X1 + X2 - cfg.a - exclusion_boundary(cfg.a)
    return (np.maximum(t, 0.0) ** 2 / 4.0).ravel()


def _factor(M):
    """Sparse LU of a symmetric positive definite matrix with a symmetric ordering."""
    return spla.splu(M.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                     options={"SymmetricMode": True})


class _Splitting:
    """ADMM for  min  f(u) + eps |B u|  subject to  A u >= 0,  f = -Phi."""

    def __init__(self, cfg, ops, cons, opts):
        self.cfg, self.ops, self.cons, self.opts = cfg, ops, cons, opts
        self.quadratic = cfg.cost.quadratic
        A = cons.A
        # row equilibration: unit row norms keep the three constraint families comparable
        norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
        self.E = 1.0 / norms
        self.As = sp.diags(self.E) @ A
        self.AtA = (self.As.T @ self.As).tocsc()
        self.use_B = opts.eps > 0
        if self.use_B:
            self.BtB = (ops.B.T @ ops.B).tocsc()
        self.N = A.shape[1]
        # scale the objective so that its linear term is O(1)
        self.cscale = 1.0 / (cfg.h * cfg.h)
        self.rho = opts.rho
        self._fact = None
        self._fact_rho = None

    def _matrix(self, H):
        M = H * self.cscale + self.opts.sigma * sp.identity(self.N, format="csc") + self.rho * self.AtA
        if self.use_B:
            M = M + self.rho * self.BtB
        return M.tocsc()

    def _solve_quadratic(self, rhs):
        if self._fact is None or self._fact_rho != self.rho:
            self._fact = _factor(self._matrix(self.ops.K))
            self._fact_rho = self.rho
        return self._fact.solve(rhs)

    def _u_update(self, u, rhs_const):
        """Solve grad f(u) * c + sigma u + rho (A'A [+ B'B]) u = rhs_const."""
        if self.quadratic:
            return self._solve_quadratic(rhs_const + self.cscale * self.ops.lin)
        x = u.copy()
        for _ in range(self.opts.newton_steps):
            grad, H = _phi_grad_hess(self.ops, self.cfg.cost, x)
            g = self.cscale * (grad - self.ops.lin) + self.opts.sigma * x + self.rho * (self.AtA @ x)
            if self.use_B:
                g = g + self.rho * (self.BtB @ x)
            g -= rhs_const
            dx = spla.spsolve(self._matrix(H), -g)
            x += dx
            if np.max(np.abs(dx)) <= 1e-13 * max(1.0, np.max(np.abs(x))):
                break
        return x

    def run(self, u0, callback=None):
        o = self.opts
        As = self.As
        u = u0.copy()
        z = np.maximum(As @ u, 0.0)
        y = np.zeros_like(z)
        if self.use_B:
            w = self.ops.B @ u
            lam = np.zeros_like(w)
        it = 0
        rp = rd = math.inf
        for it in range(1, o.max_iter + 1):
            rhs = o.sigma * u + As.T @ (self.rho * z - y)
            if self.use_B:
                rhs = rhs + self.ops.B.T @ (self.rho * w - lam)
            ut = self._u_update(u, rhs)
            Aut = As @ ut
            zh = o.alpha * Aut + (1 - o.alpha) * z
            z_new = np.maximum(zh + y / self.rho, 0.0)
            y = y + self.rho * (zh - z_new)
            z = z_new
            if self.use_B:
                Bu = self.ops.B @ ut
                wh = o.alpha * Bu + (1 - o.alpha) * w
                v = wh + lam / self.rho
                nv = np.linalg.norm(v)
                thr = o.eps * self.cscale / self.rho
                w = v * max(0.0, 1.0 - thr / nv) if nv > 0 else v
                lam = lam + self.rho * (wh - w)
            u = o.alpha * ut + (1 - o.alpha) * u
            if it % o.check_every == 0 or it == o.max_iter:
                rp, rd = self.residuals(u, z, y, lam if self.use_B else None)
                if callback is not None:
                    callback(it, u, y, rp, rd, self.rho)
                if rp <= o.tol_feas and rd <= o.tol_stat:
                    break
                if o.adaptive_rho:
                    self._adapt(u, z, y, rp, rd)
        self.y = y / self.cscale
        self.z = z
        return u, it, rp, rd

    def residuals(self, u, z, y, lam=None):
        """Unscaled primal residual and stationarity per unit area."""
        rp = float(np.max(np.abs(self.As @ u - z) / self.E)) if z.size else 0.0
        grad = self.objective_grad(u)
        dual = grad + self.As.T @ y / self.cscale
        if lam is not None:
            dual = dual + self.ops.B.T @ lam / self.cscale
        rd = float(np.max(np.abs(dual))) / (self.cfg.h ** 2)
        return rp, rd

    def objective_grad(self, u):
        if self.quadratic:
            return self.ops.K @ u - self.ops.lin
        grad, _ = _phi_grad_hess(self.ops, self.cfg.cost, u)
        return grad - self.ops.lin

    def _adapt(self, u, z, y, rp, rd):
        Au = self.As @ u
        pn = rp / max(np.max(np.abs(Au / self.E)), np.max(np.abs(z / self.E)), 1e-30)
        g = self.objective_grad(u)
        Aty = self.As.T @ y / self.cscale
        dn = rd * self.cfg.h**2 / max(np.max(np.abs(g + self.ops.lin)), np.max(np.abs(Aty)),
                                      np.max(np.abs(self.ops.lin)), 1e-30)
        if pn <= 0 or dn <= 0:
            return
        new = self.rho * math.sqrt(pn / dn)
        new = min(max(new, 1e-6), 1e6)
        if new > 5 * self.rho or new < 0.2 * self.rho:
            self.rho = new


def _polish(ops, cons, u, y_scaled, E, cfg, reg=1e-10, refine=5):
    """Solve the equality-constrained QP on the guessed active set (quadratic cost)."""
    A = cons.A
    Au = A @ u
    # a row is treated as active when it is (nearly) tight and carries a multiplier
    y = y_scaled * E
    scale = max(np.max(np.abs(Au)), 1e-30)
    act = np.where((Au <= 1e-7 * scale) & (y < -1e-12 * max(np.max(np.abs(y)), 1e-30))
                   | (Au <= 1e-9 * scale))[0]
    Aa = A[act]
    N = A.shape[1]
    m = len(act)
    K = ops.K
    KKT = sp.bmat([[K + reg * sp.identity(N), Aa.T], [Aa, -reg * sp.identity(m)]], format="csc")
    exact = sp.bmat([[K, Aa.T], [Aa, None]], format="csc")
    rhs = np.r_[ops.lin, np.zeros(m)]
    lu = _factor(KKT)  # quasi-definite, so any symmetric ordering is stable enough
    sol = lu.solve(rhs)
    for _ in range(refine):
        sol += lu.solve(rhs - exact @ sol)
    up = sol[:N]
    lam = sol[N:]
    return up, lam, act


def _restore(u: np.ndarray, cons: ConstraintSet, cfg: ModelConfig) -> np.ndarray:
    """Repair small violations by adding a multiple of |x - (a, a)|^2 / 2 and resetting the minimum to 0.

    The added paraboloid has strictly positive second differences (>= h^2) and
    forward differences (>= h^2/2), so a single multiple fixes every
    convexity and monotonicity row; subtracting the minimum only raises Phi.
    """
    n = cfg.n_grid
    h = cfg.h
    X1, X2 = cfg.grid.mesh()
    q = 0.5 * ((X1 - cfg.a) ** 2 + (X2 - cfg.a) ** 2).ravel()
    r = cons.A @ u
    bad = r < 0
    if np.any(bad & (cons.kinds != "nonneg")):
        worst_conv = max(0.0, -r[np.char.startswith(cons.kinds.astype(str), "convex")].min(initial=0.0))
        worst_mono = max(0.0, -r[np.char.startswith(cons.kinds.astype(str), "mono")].min(initial=0.0))
        delta = max(worst_conv / h**2, 2 * worst_mono / h**2) * (1 + 1e-6) + 1e-300
        u = u + delta * q
    return u - u.min()


def _radial_scale(ops, u):
    """Optimal s >= 0 for Phi(s u) with quadratic cost: s = L / (2Q)."""
    L = float(ops.lin @ u)
    Q = 0.5 * float(u @ (ops.K @ u))
    if Q <= 0 or L <= 0:
        return 1.0
    return L / (2 * Q)


def _radial_scale_eps(ops, u, eps):
    L = float(ops.lin @ u)
    Q = 0.5 * float(u @ (ops.K @ u))
    nrm = math.sqrt(2 * Q)
    if Q <= 0:
        return 1.0
    s = (L - eps * nrm) / (2 * Q)
    return s if s > 0 else 0.0


def solve_primal(cfg: ModelConfig, opts: PrimalOptions = PrimalOptions(),
                 u0: Optional[np.ndarray] = None):
    """Maximize Phi (or Phi_eps when ``opts.eps > 0``) over the discrete admissible cone.

    Returns ``(u, report)``.  ``report.status`` is "Converged" or
    "NotConverged"; in the latter case ``u`` is the best feasible iterate.
    """
    t0 = time.perf_counter()
    ops = phi_operators(cfg)
    cons = assemble_constraints(cfg, opts.w_stencil)
    if u0 is None:
        u0 = initial_guess(cfg) if opts.init == "guess" else np.zeros(cfg.n_grid**2)
    u0 = np.ravel(np.asarray(u0, dtype=float))
    solver = _Splitting(cfg, ops, cons, opts)
    cost = cfg.cost

    def finish(v):
        v = _restore(v, cons, cfg)
        if cost.quadratic:
            s = _radial_scale_eps(ops, v, opts.eps) if opts.eps > 0 else _radial_scale(ops, v)
            cand = s * v
            if _phi_value(ops, cost, cand, opts.eps) >= _phi_value(ops, cost, v, opts.eps):
                return cand, s
        return v, 1.0

    best = {"u": None, "phi": -math.inf}
    phi_hist, step_hist = [], []

    def record(it, u, y, rp, rd, rho):
        step_hist.append(rho)
        cand, _ = finish(u)
        val = _phi_value(ops, cost, cand, opts.eps)
        if val > best["phi"]:
            best.update(u=cand, phi=val)
        phi_hist.append(best["phi"])

    start, _ = finish(u0)
    best.update(u=start, phi=_phi_value(ops, cost, start, opts.eps))
    phi_hist.append(best["phi"])
    u, iters, rp, rd = solver.run(u0, callback=record)
    converged = rp <= opts.tol_feas and rd <= opts.tol_stat
    polished = False
    if opts.polish and cost.quadratic and opts.eps == 0:
        # multipliers on a degenerate active set are not unique, so the polished
        # point is judged by feasibility and objective value only
        try:
            up, _, _ = _polish(ops, cons, u, solver.y, solver.E, cfg)
        except RuntimeError:
            up = None
        if up is not None and cons.violation(up) <= 1e-10 * max(1.0, np.abs(up).max()):
            cand, _ = finish(up)
            val = _phi_value(ops, cost, cand, 0.0)
            if val >= best["phi"] - 1e-12 * max(1.0, abs(best["phi"])):
                polished = True
                if val > best["phi"]:
                    best.update(u=cand, phi=val)
                    phi_hist.append(val)
    cand, s = finish(u)
    val = _phi_value(ops, cost, cand, opts.eps)
    if val > best["phi"]:
        best.update(u=cand, phi=val)
        phi_hist.append(val)
    ubest = best["u"]
    field_ = ScalarField(cfg.grid, ubest.reshape(cfg.n_grid, cfg.n_grid))
    report = SolveReport(
        status="Converged" if converged or polished else "NotConverged",
        iterations=iters,
        phi=float(best["phi"]),
        max_violation=cons.violation(ubest),
        violation_by_kind=cons.violation_by_kind(ubest),
        stationarity=float(rd),
        primal_residual=float(rp),
        polished=polished,
        rescale=float(s),
        step_history=[float(r) for r in step_hist],
        phi_history=[float(p) for p in phi_hist],
        wall_time=time.perf_counter() - t0,
        n_grid=cfg.n_grid,
        a=float(cfg.a),
        w_stencil=opts.w_stencil,
        constraint_counts=cons.counts,
        eps=float(opts.eps),
    )
    return field_, report


def solve_primal_continuation(cfg: ModelConfig, eps_schedule, opts: PrimalOptions = PrimalOptions()):
    """Warm-started solves of Phi_eps along a decreasing schedule ending at 0."""
    sched = [float(e) for e in eps_schedule]
    if not sched or sched[-1] != 0.0 or any(b >= a for a, b in zip(sched, sched[1:])):
        raise ValueError("eps_schedule must be strictly decreasing and end at 0")
    u0 = None
    stages = []
    t0 = time.perf_counter()
    status = "Converged"
    for eps in sched:
        o = PrimalOptions(**{**asdict(opts), "eps": eps})
        u, rep = solve_primal(cfg, o, u0=u0)
        u0 = u.values.ravel()
        stages.append({"eps": eps, "phi_eps": rep.phi, "phi": float(evaluate_phi_regularized(u, cfg, 0.0)),
                       "status": rep.status, "iterations": rep.iterations})
        if rep.status != "Converged":
            status = "NotConverged"
    rep.stages = stages
    rep.status = status
    rep.wall_time = time.perf_counter() - t0
    return u, rep

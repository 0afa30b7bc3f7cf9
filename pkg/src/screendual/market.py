"""Price menu, agent best responses and the profit replay of a payoff."""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import Grid, ModelConfig, RangeTruncationWarning, ScalarField, evaluate_phi, gradient, legendre_transform
from .parallel import thread_count

TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class PriceMenu:
    """Prices v on a product grid [0, ymax]^2; v is the conjugate of the payoff over X."""

    grid: Grid
    values: np.ndarray
    provenance: str = ""

    @property
    def products(self) -> np.ndarray:
        Y1, Y2 = self.grid.mesh()
        return np.stack([Y1.ravel(), Y2.ravel()], axis=1)

    def price(self, y) -> float:
        """Price at the nearest product node."""
        g = self.grid
        i = int(round((y[0] - g.lo) / g.h))
        j = int(round((y[1] - g.lo) / g.h))
        if not (0 <= i < g.n and 0 <= j < g.n):
            return math.inf
        return float(self.values[i, j])


def _product_grid(u: ScalarField, margin_cells: int = 3) -> Grid:
    h = u.grid.h
    G = gradient(u).values
    ymax = max(float(G.max()), 0.0)
    cells = int(math.ceil(ymax / h - 1e-9)) + margin_cells
    return Grid(0.0, cells + 1, cells * h)


def price_menu(u: ScalarField, cfg: Optional[ModelConfig] = None, product_grid: Optional[Grid] = None) -> PriceMenu:
    """v(y) = max over agent nodes of x.y - u(x) on a product grid covering Du(X) plus a margin.

    For y >= 0 the largest convex, coordinatewise non-decreasing extension of
    u beyond X does not change this maximum, so the conjugate over X is the
    conjugate of the extension.  Off the sold products the result is the
    lower envelope of admissible menus.
    """
    pg = product_grid if product_grid is not None else _product_grid(u)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RangeTruncationWarning)
        v = legendre_transform(u, pg)
    return PriceMenu(pg, v.values, provenance="conjugate of payoff on X")


def _choose(util: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Index of the best product per row, ties toward larger y1 + y2 then smaller (y1, y2)."""
    best = util.max(axis=1, keepdims=True)
    tied = util >= best - TIE_TOL * np.maximum(1.0, np.abs(best))
    s = Y[:, 0] + Y[:, 1]
    # rank products: larger sum first, then lexicographically smaller
    order = np.lexsort((Y[:, 1], Y[:, 0], -s))
    rank = np.empty(order.size, dtype=np.int64)
    rank[order] = np.arange(order.size)
    score = np.where(tied, rank[None, :], np.iinfo(np.int64).max)
    return np.argmin(score, axis=1)


def best_responses(menu: PriceMenu, X: np.ndarray, chunk: int = 512):
    """Vectorized best responses for agents ``X`` (k, 2); returns (products (k, 2), utilities (k,)).

    The outside option (y = 0 at price 0) is always available.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.vstack([[0.0, 0.0], menu.products])
    price = np.r_[0.0, menu.values.ravel()]
    finite = np.isfinite(price)
    Y = Y[finite]
    price = price[finite]
    out_y = np.empty((X.shape[0], 2))
    out_u = np.empty(X.shape[0])

    def work(s):
        xs = X[s:s + chunk]
        util = xs @ Y.T - price[None, :]
        k = _choose(util, Y)
        out_y[s:s + chunk] = Y[k]
        out_u[s:s + chunk] = util[np.arange(len(xs)), k]

    starts = range(0, X.shape[0], chunk)
    workers = thread_count()
    if workers > 1 and X.shape[0] > chunk:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(work, starts))
    else:
        for s in starts:
            work(s)
    return out_y, out_u


def best_response(menu: PriceMenu, x) -> tuple:
    """Utility-maximizing product for one agent; ties toward larger y1 + y2, then lexicographically smaller."""
    y, util = best_responses(menu, np.asarray(x, dtype=float)[None, :])
    return (float(y[0, 0]), float(y[0, 1])), float(util[0])


@dataclass(eq=False)
class MarketOutcome:
    agents: np.ndarray          # (n, n, 2) agent types
    products: np.ndarray        # (n, n, 2) chosen products
    utility: np.ndarray         # (n, n)
    profit: float
    histogram: np.ndarray       # rows (y1, y2, mass), products with positive mass
    exclusion_fraction: float
    phi: float
    menu: PriceMenu = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"profit": self.profit, "phi": self.phi, "profit_minus_phi": self.profit - self.phi,
                "exclusion_fraction": self.exclusion_fraction, "min_utility": float(self.utility.min()),
                "n_products_sold": int(self.histogram.shape[0]), **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_histogram_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["y1", "y2", "mass"])
            for y1, y2, m in self.histogram:
                w.writerow([format(y1, ".17g"), format(y2, ".17g"), format(m, ".17g")])


def simulate_market(u: ScalarField, cfg: ModelConfig, menu: Optional[PriceMenu] = None) -> MarketOutcome:
    """Post the menu, let every grid agent choose, and integrate v(y) - c(y) against f."""
    menu = menu if menu is not None else price_menu(u, cfg)
    X1, X2 = cfg.grid.mesh()
    agents = np.stack([X1, X2], axis=-1)
    y, util = best_responses(menu, agents.reshape(-1, 2))
    w = cfg.node_weights().ravel()
    price = np.einsum("ij,ij->i", agents.reshape(-1, 2), y) - util
    profit = float(np.sum(w * (price - cfg.cost.c(y))))
    keys, inv = np.unique(y, axis=0, return_inverse=True)
    mass = np.bincount(inv.ravel(), weights=w, minlength=keys.shape[0])
    hist = np.c_[keys, mass]
    total = float(w.sum())
    outside = np.all(y == 0.0, axis=1)
    excl = float(w[outside].sum() / total)
    phi = evaluate_phi(u, cfg, tol_cone=math.inf)
    return MarketOutcome(agents=agents, products=y.reshape(agents.shape), utility=util.reshape(X1.shape),
                         profit=profit, histogram=hist, exclusion_fraction=excl, phi=phi, menu=menu)


def ic_ir_check(outcome: MarketOutcome, pairs: int = 10_000, seed: int = 0) -> dict:
    """Incentive compatibility on random agent pairs and individual rationality on all agents."""
    rng = np.random.default_rng(seed)
    A = outcome.agents.reshape(-1, 2)
    Y = outcome.products.reshape(-1, 2)
    U = outcome.utility.ravel()
    menu = outcome.menu
    g = menu.grid
    ii = np.rint((Y[:, 0] - g.lo) / g.h).astype(int)
    jj = np.rint((Y[:, 1] - g.lo) / g.h).astype(int)
    inside = (ii >= 0) & (ii < g.n) & (jj >= 0) & (jj < g.n)
    P = np.where(inside, menu.values[ii.clip(0, g.n - 1), jj.clip(0, g.n - 1)], 0.0)
    P = np.where(np.all(Y == 0.0, axis=1), 0.0, P)
    k1 = rng.integers(0, A.shape[0], pairs)
    k2 = rng.integers(0, A.shape[0], pairs)
    own = np.einsum("ij,ij->i", A[k1], Y[k1]) - P[k1]
    mimic = np.einsum("ij,ij->i", A[k1], Y[k2]) - P[k2]
    worst_ic = float(np.max(mimic - own))
    return {"pairs": pairs, "worst_ic_gain": worst_ic, "ic_ok": bool(worst_ic <= 1e-12),
            "min_utility": float(U.min()), "ir_ok": bool(U.min() >= 0.0)}


def bunching_summary(outcome: MarketOutcome, min_agents: int = 3) -> dict:
    """Products chosen by at least ``min_agents`` grid agents, with their total mass."""
    Y = outcome.products.reshape(-1, 2)
    keys, inv, counts = np.unique(Y, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    bunched = (counts >= min_agents) & ~np.all(keys == 0.0, axis=1)
    mass = {tuple(map(float, k)): float(m) for k, m in zip(outcome.histogram[:, :2], outcome.histogram[:, 2])}
    sel = keys[bunched]
    total = float(sum(mass[tuple(map(float, k))] for k in sel))
    return {"n_bunched_products": int(bunched.sum()), "bunched_mass": total,
            "min_bunched_mass": float(min((mass[tuple(map(float, k))] for k in sel), default=0.0)),
            "products": sel.tolist(), "counts": counts[bunched].tolist()}


def directional_jump(menu: PriceMenu, y, d, cells: int = 1) -> float:
    """Outer minus inner one-sided difference quotient of v at y along the unit direction d."""
    g = menu.grid
    d = np.asarray(d, dtype=float)
    d = d / np.max(np.abs(d))
    step = np.rint(d * cells).astype(int)
    i = int(round((y[0] - g.lo) / g.h))
    j = int(round((y[1] - g.lo) / g.h))
    ip, jp = i + step[0], j + step[1]
    im, jm = i - step[0], j - step[1]
    if not (0 <= min(ip, im) and max(ip, im) < g.n and 0 <= min(jp, jm) and max(jp, jm) < g.n):
        return math.nan
    length = g.h * float(np.hypot(*step))
    v = menu.values
    fwd = (v[ip, jp] - v[i, j]) / length
    bwd = (v[i, j] - v[im, jm]) / length
    return float(fwd - bwd)

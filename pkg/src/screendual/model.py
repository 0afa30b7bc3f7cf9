"""Problem data, grid fields, costs, the reduced objective and discrete conjugates.

Conventions
-----------
Nodes are indexed ``values[i, j]`` at ``(a + i*h, a + j*h)`` so the first axis
runs along x1.  Integrals of nodal data use the trapezoid rule.  Integrals that
involve a gradient use the *cell-corner* rule: every cell contributes its four
corners with weight ``h**2/4``, and at each corner the gradient is the pair of
one-sided differences along the two cell edges meeting there.  This is exactly
the average of the two piecewise-linear interpolants on the two diagonal
triangulations of the grid, so it is second order, exact for affine data and
free of the checkerboard null space of centred differences.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

# corner order inside a cell: (di, dj) offsets of the corner node
CORNERS = ((0, 0), (1, 0), (0, 1), (1, 1))


class ConeViolation(ValueError):
    """A gradient left the product cone Y = [0, inf)^2 by more than the tolerance."""


class RangeTruncationWarning(UserWarning):
    """Too many conjugate maximizers sit on the boundary of the source grid."""


# --------------------------------------------------------------------------- grid


@dataclass(frozen=True)
class Grid:
    """Uniform square grid ``[lo, lo + side]^2`` with ``n`` nodes per side."""

    lo: float
    n: int
    side: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("a grid needs at least two nodes per side")
        if not self.side > 0:
            raise ValueError("grid side must be positive")

    @property
    def h(self) -> float:
        return self.side / (self.n - 1)

    @property
    def coords(self) -> np.ndarray:
        return self.lo + self.h * np.arange(self.n)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.coords
        return np.meshgrid(x, x, indexing="ij")

    def trapezoid_weights(self) -> np.ndarray:
        w = np.ones(self.n)
        w[0] = w[-1] = 0.5
        return np.outer(w, w) * self.h**2

    def corner_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates of the four corner quadrature points, shape (n-1, n-1, 4)."""
        X1, X2 = self.mesh()
        n = self.n
        q1 = np.stack([X1[di:n - 1 + di, dj:n - 1 + dj] for di, dj in CORNERS], axis=-1)
        q2 = np.stack([X2[di:n - 1 + di, dj:n - 1 + dj] for di, dj in CORNERS], axis=-1)
        return q1, q2

    def to_corners(self, nodal: np.ndarray) -> np.ndarray:
        """Sample a nodal array (n, n, ...) at the corner quadrature points."""
        n = self.n
        return np.stack([nodal[di:n - 1 + di, dj:n - 1 + dj] for di, dj in CORNERS], axis=2)


# -------------------------------------------------------------------------- costs


@dataclass(frozen=True)
class CostSpec:
    """Convex production cost on Y = [0, inf)^2 with its conjugate.

    All evaluators act on arrays whose last axis has length 2.  ``hess``
    returns the 2x2 Hessian blocks (shape ``(..., 2, 2)``).
    """

    name: str
    c: Callable[[np.ndarray], np.ndarray]
    dc: Callable[[np.ndarray], np.ndarray]
    cstar: Callable[[np.ndarray], np.ndarray]
    dcstar: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    quadratic: bool = False


def quadratic_cost() -> CostSpec:
    """c(y) = |y|^2 / 2 restricted to the nonnegative quadrant."""

    def hess(y):
        return np.broadcast_to(np.eye(2), y.shape[:-1] + (2, 2)).copy()

    return CostSpec(
        name="quadratic",
        c=lambda y: 0.5 * np.sum(y * y, axis=-1),
        dc=lambda y: np.array(y, dtype=float, copy=True),
        cstar=lambda z: 0.5 * np.sum(np.maximum(z, 0.0) ** 2, axis=-1),
        dcstar=lambda z: np.maximum(z, 0.0),
        hess=hess,
        quadratic=True,
    )


def quartic_cost() -> CostSpec:
    """c(y) = |y|^4, used to exercise the non-quadratic code paths."""

    def dcstar(z):
        zp = np.maximum(z, 0.0)
        r = np.linalg.norm(zp, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(r > 0, zp * np.cbrt(r / 4.0) / r, 0.0)
        return out

    def hess(y):
        s = np.sum(y * y, axis=-1)[..., None, None]
        return 4.0 * s * np.eye(2) + 8.0 * y[..., :, None] * y[..., None, :]

    return CostSpec(
        name="quartic",
        c=lambda y: np.sum(y * y, axis=-1) ** 2,
        dc=lambda y: 4.0 * np.sum(y * y, axis=-1, keepdims=True) * y,
        # sup_{y >= 0} z.y - |y|^4 is attained along z_+ with |y|^3 = |z_+|/4
        cstar=lambda z: 0.75 * np.linalg.norm(np.maximum(z, 0.0), axis=-1) ** (4.0 / 3.0)
        / 4.0 ** (1.0 / 3.0),
        dcstar=dcstar,
        hess=hess,
    )


COSTS = {"quadratic": quadratic_cost, "quartic": quartic_cost}


def cost_from_name(name: str) -> CostSpec:
    try:
        return COSTS[name]()
    except KeyError:
        raise ValueError(f"unknown cost {name!r}; choose from {sorted(COSTS)}") from None


# ------------------------------------------------------------------------- config


@dataclass(frozen=True)
class ModelConfig:
    """Square offset ``a``, nodes per side and the data f, c.

    ``density`` is either None (uniform f = 1) or an (n, n) array of nodal
    values; it must integrate to one under the trapezoid rule.
    """

    a: float = 0.0
    n_grid: int = 32
    cost: CostSpec = field(default_factory=quadratic_cost)
    density: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.a >= 0:
            raise ValueError("a must be nonnegative")
        if int(self.n_grid) != self.n_grid or self.n_grid < 8:
            raise ValueError("n_grid must be an integer >= 8")
        if self.density is not None:
            f = np.asarray(self.density, dtype=float)
            if f.shape != (self.n_grid, self.n_grid):
                raise ValueError("density must have shape (n_grid, n_grid)")
            if not np.all(np.isfinite(f)) or np.any(f[1:-1, 1:-1] <= 0):
                raise ValueError("density must be finite and positive on the interior")
            mass = float(np.sum(self.grid.trapezoid_weights() * f))
            if abs(mass - 1.0) > 1e-10:
                raise ValueError(f"density integrates to {mass!r}, expected 1")

    @property
    def grid(self) -> Grid:
        return Grid(float(self.a), int(self.n_grid))

    @property
    def h(self) -> float:
        return self.grid.h

    def density_nodes(self) -> np.ndarray:
        if self.density is None:
            return np.ones((self.n_grid, self.n_grid))
        return np.asarray(self.density, dtype=float)

    def node_weights(self) -> np.ndarray:
        """Trapezoid weights times f at the nodes."""
        return self.grid.trapezoid_weights() * self.density_nodes()

    def corner_weights(self) -> np.ndarray:
        """Cell-corner weights h^2/4 times f, shape (n-1, n-1, 4)."""
        return 0.25 * self.h**2 * self.grid.to_corners(self.density_nodes())


# ------------------------------------------------------------------------- fields


@dataclass(frozen=True)
class AdmissibilityReport:
    min_value: float
    min_forward_difference: float
    min_second_difference: float
    admissible: bool


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Nodal values of a payoff on a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"values have shape {v.shape}, grid is {self.grid.n}x{self.grid.n}")
        if not np.all(np.isfinite(v)):
            raise ValueError("scalar field has non-finite entries")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        X1, X2 = grid.mesh()
        return cls(grid, np.broadcast_to(fn(X1, X2), X1.shape).astype(float))

    def admissibility(self, tol_mono: float = 1e-8, tol_convex: float = 1e-8,
                      w_stencil: int = 2, tol_value: float = 1e-8) -> AdmissibilityReport:
        """Check u >= 0, forward differences >= 0 and wide-stencil second differences >= 0."""
        u = self.values
        fwd = min(np.diff(u, axis=0).min(), np.diff(u, axis=1).min())
        sec = min(second_differences(u, d).min(initial=np.inf) for d in stencil_directions(w_stencil))
        ok = u.min() >= -tol_value and fwd >= -tol_mono and sec >= -tol_convex
        return AdmissibilityReport(float(u.min()), float(fwd), float(sec), bool(ok))

    def mirrored(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.T)


@dataclass(frozen=True, eq=False)
class VectorField:
    """Gradient-like samples.

    ``layout == "node"``: values of shape (n, n, 2), one vector per node.
    ``layout == "corner"``: values of shape (n-1, n-1, 4, 2), one vector per
    cell corner, matching the quadrature used for Phi.
    """

    grid: Grid
    values: np.ndarray
    layout: str = "node"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        n = self.grid.n
        expected = {"node": (n, n, 2), "corner": (n - 1, n - 1, 4, 2)}
        if self.layout not in expected:
            raise ValueError(f"unknown layout {self.layout!r}")
        if v.shape != expected[self.layout]:
            raise ValueError(f"{self.layout} field needs shape {expected[self.layout]}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vector field has non-finite entries")
        object.__setattr__(self, "values", v)

    def at_corners(self) -> np.ndarray:
        if self.layout == "corner":
            return self.values
        return self.grid.to_corners(self.values)

    def at_nodes(self) -> np.ndarray:
        """Nodal values; corner data are averaged over the cells touching each node."""
        if self.layout == "node":
            return self.values
        n = self.grid.n
        acc = np.zeros((n, n, 2))
        cnt = np.zeros((n, n, 1))
        for k, (di, dj) in enumerate(CORNERS):
            acc[di:n - 1 + di, dj:n - 1 + dj] += self.values[:, :, k]
            cnt[di:n - 1 + di, dj:n - 1 + dj] += 1
        return acc / cnt

    @classmethod
    def from_function(cls, grid: Grid, fn, layout: str = "node"):
        """Sample ``fn(x1, x2) -> (g1, g2)`` at nodes or at corner points."""
        if layout == "node":
            X1, X2 = grid.mesh()
        else:
            X1, X2 = grid.corner_coords()
        g1, g2 = fn(X1, X2)
        vals = np.stack(np.broadcast_arrays(g1, g2, X1)[:2], axis=-1).astype(float)
        return cls(grid, vals, layout)


# --------------------------------------------------------------- stencil helpers


def stencil_directions(w: int) -> list[tuple[int, int]]:
    """Primitive directions (p, q) with max(|p|, |q|) <= w, one per line, in a fixed order."""
    if w not in (1, 2, 3):
        raise ValueError("w_stencil must be 1, 2 or 3")
    dirs = [(1, 0), (0, 1), (1, 1), (1, -1)]
    if w >= 2:
        dirs += [(1, 2), (2, 1), (1, -2), (2, -1)]
    if w >= 3:
        dirs += [(1, 3), (3, 1), (1, -3), (3, -1), (2, 3), (3, 2), (2, -3), (3, -2)]
    return dirs


def second_differences(u: np.ndarray, d: tuple[int, int]) -> np.ndarray:
    """u(x - e) - 2u(x) + u(x + e) for e = d on all nodes where it fits."""
    p, q = d
    n1, n2 = u.shape
    ap, aq = abs(p), abs(q)
    if 2 * ap >= n1 or 2 * aq >= n2:
        return np.empty((0, 0))
    i = slice(ap, n1 - ap)
    j = slice(aq, n2 - aq)
    c = u[i, j]
    plus = u[ap + p:n1 - ap + p, aq + q:n2 - aq + q]
    minus = u[ap - p:n1 - ap - p, aq - q:n2 - aq - q]
    return plus - 2 * c + minus


# ------------------------------------------------------------------- gradients


def gradient(u: ScalarField) -> VectorField:
    """Nodal gradient: centred differences inside, one-sided on the edges."""
    h = u.grid.h
    g1 = np.gradient(u.values, h, axis=0, edge_order=1)
    g2 = np.gradient(u.values, h, axis=1, edge_order=1)
    return VectorField(u.grid, np.stack([g1, g2], axis=-1), "node")


def corner_gradient(u: ScalarField) -> VectorField:
    """Cell-local gradients at the four corners of every cell (see module docstring)."""
    h = u.grid.h
    v = u.values
    d1 = np.diff(v, axis=0) / h  # x1-edges, shape (n-1, n)
    d2 = np.diff(v, axis=1) / h  # x2-edges, shape (n, n-1)
    out = np.empty((v.shape[0] - 1, v.shape[1] - 1, 4, 2))
    for k, (di, dj) in enumerate(CORNERS):
        out[:, :, k, 0] = d1[:, dj:dj + v.shape[1] - 1]
        out[:, :, k, 1] = d2[di:di + v.shape[0] - 1, :]
    return VectorField(u.grid, out, "corner")


# -------------------------------------------------------------------- objective


def _check_grid(u: ScalarField, cfg: ModelConfig):
    if u.grid != cfg.grid:
        raise ValueError("field grid does not match the configuration")


def _phi_parts(u: ScalarField, cfg: ModelConfig, tol_cone: float):
    _check_grid(u, cfg)
    g = corner_gradient(u).values
    if g.min() < -tol_cone:
        raise ConeViolation(f"gradient component {g.min():.3e} below the cone (tol {tol_cone:g})")
    g = np.maximum(g, 0.0)
    w = cfg.corner_weights()
    q1, q2 = cfg.grid.corner_coords()
    uc = cfg.grid.to_corners(u.values)
    linear = float(np.sum(w * (q1 * g[..., 0] + q2 * g[..., 1] - uc)))
    cost = float(np.sum(w * cfg.cost.c(g)))
    sq = float(np.sum(w * np.sum(g * g, axis=-1)))
    return linear, cost, sq


def evaluate_phi(u: ScalarField, cfg: ModelConfig, tol_cone: float = 1e-6) -> float:
    """Phi[u] = int x.Du - u - c(Du) with the cell-corner quadrature."""
    linear, cost, _ = _phi_parts(u, cfg, tol_cone)
    return linear - cost


def evaluate_phi_regularized(u: ScalarField, cfg: ModelConfig, eps: float,
                             tol_cone: float = 1e-6) -> float:
    """Phi[u] - eps * <|Du|^2>^(1/2)."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    linear, cost, sq = _phi_parts(u, cfg, tol_cone)
    return linear - cost - eps * math.sqrt(sq)


# --------------------------------------------------------------------- conjugate


def _conjugate_1d(vals: np.ndarray, x: np.ndarray, z: np.ndarray, chunk: int = 256):
    """max_k z*x_k - vals[..., k] along the last axis; returns (max, argmax)."""
    lead = vals.shape[:-1]
    best = np.empty(lead + (z.size,))
    arg = np.empty(lead + (z.size,), dtype=np.int64)
    for s in range(0, z.size, chunk):
        zz = z[s:s + chunk]
        t = zz[:, None] * x[None, :] - vals[..., None, :]
        arg[..., s:s + chunk] = np.argmax(t, axis=-1)
        best[..., s:s + chunk] = np.max(t, axis=-1)
    return best, arg


def legendre_transform(g: ScalarField, target: Grid, boundary_fraction: float = 0.5,
                       return_argmax: bool = False):
    """Discrete conjugate g*(z) = max over source nodes of z.x - g(x), on ``target``.

    The maximum over the product grid is separable, so it is computed as two
    nested one-dimensional transforms.  A RangeTruncationWarning is issued when
    more than ``boundary_fraction`` of the targets are maximized on the source
    boundary.
    """
    x = g.grid.coords
    z = target.coords
    # inner: phi[j, k] = max_i z_k x_i - g[i, j]
    inner, arg_i = _conjugate_1d(g.values.T, x, z)       # shape (n_src, n_tgt) indexed [j, k1]
    outer, arg_j = _conjugate_1d(-inner.T, x, z)         # shape (n_tgt k1, n_tgt k2)
    vals = outer
    i_star = arg_i[arg_j, np.arange(z.size)[:, None]]
    j_star = arg_j
    n = g.grid.n
    on_bdry = (i_star == 0) | (i_star == n - 1) | (j_star == 0) | (j_star == n - 1)
    frac = float(on_bdry.mean())
    if frac > boundary_fraction:
        warnings.warn(f"{frac:.0%} of conjugate maximizers lie on the source boundary",
                      RangeTruncationWarning, stacklevel=2)
    field_ = ScalarField(target, vals)
    if return_argmax:
        return field_, np.stack([i_star, j_star], axis=-1)
    return field_


# --------------------------------------------------------------------------- I/O


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_scalar_csv(u: ScalarField, path) -> None:
    X1, X2 = u.grid.mesh()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "value"])
        for x1, x2, v in zip(X1.ravel(), X2.ravel(), u.values.ravel()):
            w.writerow([_fmt(x1), _fmt(x2), _fmt(v)])


def read_scalar_csv(path) -> ScalarField:
    """Read a row-major scalar CSV written by :func:`write_scalar_csv`."""
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    n = int(round(math.sqrt(data.shape[0])))
    if n * n != data.shape[0]:
        raise ValueError("scalar CSV does not hold a square grid")
    x1 = data[:, 0].reshape(n, n)
    lo = float(x1[0, 0])
    side = float(x1[-1, 0] - lo)
    return ScalarField(Grid(lo, n, side), data[:, 2].reshape(n, n))


def write_vector_csv(G: VectorField, path) -> None:
    """Vector CSV; corner layouts list each quadrature point at its node position."""
    if G.layout == "node":
        X1, X2 = G.grid.mesh()
        vals = G.values.reshape(-1, 2)
    else:
        X1, X2 = G.grid.corner_coords()
        vals = G.values.reshape(-1, 2)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "g1", "g2"])
        for x1, x2, (g1, g2) in zip(X1.ravel(), X2.ravel(), vals):
            w.writerow([_fmt(x1), _fmt(x2), _fmt(g1), _fmt(g2)])

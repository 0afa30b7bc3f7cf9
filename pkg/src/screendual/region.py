"""Hessian-rank classification of the payoff and extraction of bunching segments."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .model import ScalarField, gradient

EXCLUDED, BLUNT, TARGETED, CUSTOMIZED = 0, 1, 2, 3
LABEL_NAMES = {EXCLUDED: "Excluded", BLUNT: "BluntBunch", TARGETED: "TargetedBunch", CUSTOMIZED: "Customized"}


@dataclass(frozen=True)
class RegionThresholds:
    tau_rank: Optional[float] = None       # default 10 h
    tau_angle_deg: float = 3.0

    def rank_tol(self, h: float) -> float:
        return 10.0 * h if self.tau_rank is None else float(self.tau_rank)


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Per-node labels with the Hessian eigenvalues lam1 <= lam2 and the thresholds used.

    ``null_angle`` is the direction (radians, in (-pi/2, pi/2]) of the
    eigenvector of lam1, i.e. the ruling direction in rank-1 zones.
    """

    grid: object
    labels: np.ndarray
    lam1: np.ndarray
    lam2: np.ndarray
    null_angle: np.ndarray
    tau_rank: float
    tau_angle_deg: float

    def fractions(self) -> dict:
        w = self.grid.trapezoid_weights() / self.grid.side**2
        return {LABEL_NAMES[k]: float(w[self.labels == k].sum()) for k in LABEL_NAMES}

    def area(self, label: int) -> float:
        return float(self.grid.trapezoid_weights()[self.labels == label].sum())

    def write_csv(self, path) -> None:
        X1, X2 = self.grid.mesh()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x1", "x2", "label", "lam1", "lam2"])
            for x1, x2, lab, l1, l2 in zip(X1.ravel(), X2.ravel(), self.labels.ravel(),
                                           self.lam1.ravel(), self.lam2.ravel()):
                w.writerow([format(x1, ".17g"), format(x2, ".17g"), LABEL_NAMES[int(lab)],
                            format(l1, ".17g"), format(l2, ".17g")])


def hessian(u: ScalarField):
    """9-point second differences at interior nodes, copied outward to the edges."""
    v = u.values
    h = u.grid.h
    uxx = np.empty_like(v)
    uyy = np.empty_like(v)
    uxy = np.empty_like(v)
    uxx[1:-1, 1:-1] = (v[2:, 1:-1] - 2 * v[1:-1, 1:-1] + v[:-2, 1:-1]) / h**2
    uyy[1:-1, 1:-1] = (v[1:-1, 2:] - 2 * v[1:-1, 1:-1] + v[1:-1, :-2]) / h**2
    uxy[1:-1, 1:-1] = (v[2:, 2:] - v[2:, :-2] - v[:-2, 2:] + v[:-2, :-2]) / (4 * h**2)
    for arr in (uxx, uyy, uxy):
        arr[0, :] = arr[1, :]
        arr[-1, :] = arr[-2, :]
        arr[:, 0] = arr[:, 1]
        arr[:, -1] = arr[:, -2]
    return uxx, uyy, uxy


def _eig2(a, b, c):
    """Eigen-decomposition of [[a, c], [c, b]]: (lam1, lam2, angle of lam1's eigenvector)."""
    m = 0.5 * (a + b)
    d = np.sqrt((0.5 * (a - b)) ** 2 + c**2)
    lam1 = m - d
    lam2 = m + d
    # eigenvector of lam2 makes angle phi with phi = atan2(2c, a - b) / 2
    phi2 = 0.5 * np.arctan2(2 * c, a - b)
    ang = phi2 + 0.5 * np.pi
    ang = np.where(ang > 0.5 * np.pi, ang - np.pi, ang)
    return lam1, lam2, ang


def classify_regions(u: ScalarField, thresholds: RegionThresholds = RegionThresholds()) -> RegionMask:
    """Label nodes by Hessian rank; rank-1 nodes split by whether the ruling is antidiagonal."""
    tau = thresholds.rank_tol(u.grid.h)
    uxx, uyy, uxy = hessian(u)
    lam1, lam2, ang = _eig2(uxx, uyy, uxy)
    labels = np.full(u.values.shape, TARGETED, dtype=np.int8)
    excluded = np.abs(lam1) + np.abs(lam2) <= tau
    custom = (lam1 >= tau) & ~excluded
    tol = math.radians(thresholds.tau_angle_deg)
    # distance of the ruling angle from -45 degrees, modulo pi
    dev = np.abs(((ang + 0.25 * np.pi) + 0.5 * np.pi) % np.pi - 0.5 * np.pi)
    blunt = ~excluded & ~custom & (dev <= tol)
    labels[excluded] = EXCLUDED
    labels[custom] = CUSTOMIZED
    labels[blunt] = BLUNT
    return RegionMask(u.grid, labels, lam1, lam2, ang, tau, thresholds.tau_angle_deg)


# ------------------------------------------------------------------ bunching


@dataclass
class BunchSegment:
    p: tuple
    q: tuple
    theta: float            # ruling angle in radians, (-pi/2, pi/2]
    y: tuple                # common product (gradient at the midpoint)
    residual: float         # max point-to-chord distance
    spread: float           # max gradient deviation along the segment

    def to_dict(self) -> dict:
        return asdict(self)


def _bilinear(arr, grid, x1, x2):
    n = grid.n
    s = (x1 - grid.lo) / grid.h
    t = (x2 - grid.lo) / grid.h
    i = int(min(max(math.floor(s), 0), n - 2))
    j = int(min(max(math.floor(t), 0), n - 2))
    fs = s - i
    ft = t - j
    return ((1 - fs) * (1 - ft) * arr[i, j] + fs * (1 - ft) * arr[i + 1, j]
            + (1 - fs) * ft * arr[i, j + 1] + fs * ft * arr[i + 1, j + 1])


def _node_of(grid, x1, x2):
    i = int(round((x1 - grid.lo) / grid.h))
    j = int(round((x2 - grid.lo) / grid.h))
    return min(max(i, 0), grid.n - 1), min(max(j, 0), grid.n - 1)


def extract_bunches(u: ScalarField, mask: RegionMask, tau_bunch: Optional[float] = None,
                    min_length: float = 3.0) -> list:
    """Trace straight rulings through rank-1 nodes.

    Seeds are rank-1 nodes in lexicographic order; from each seed the chord is
    marched both ways along the seed's null direction while the nodes stay
    rank-1.  Nodes within half a cell of an accepted chord are marked visited.
    Segments shorter than ``min_length`` cells or with gradient spread above
    ``tau_bunch`` (default 10 h) are dropped.
    """
    grid = u.grid
    h = grid.h
    tau_b = 10 * h if tau_bunch is None else tau_bunch
    rank1 = (mask.labels == BLUNT) | (mask.labels == TARGETED)
    if not rank1.any():
        return []
    G = gradient(u).values
    X1, X2 = grid.mesh()
    visited = np.zeros_like(rank1)
    lo, hi = grid.lo, grid.lo + grid.side
    segs = []
    for i, j in zip(*np.nonzero(rank1)):
        if visited[i, j]:
            continue
        th = float(mask.null_angle[i, j])
        d = np.array([math.cos(th), math.sin(th)])
        x0 = np.array([X1[i, j], X2[i, j]])
        ends = []
        for sgn in (1.0, -1.0):
            s = 0.0
            while True:
                nxt = x0 + sgn * (s + 0.5 * h) * d
                if not (lo - 1e-12 <= nxt[0] <= hi + 1e-12 and lo - 1e-12 <= nxt[1] <= hi + 1e-12):
                    break
                a, b = _node_of(grid, *nxt)
                if not rank1[a, b]:
                    break
                s += 0.5 * h
            ends.append(x0 + sgn * s * d)
        p, q = ends[1], ends[0]
        length = float(np.linalg.norm(q - p))
        k = max(2, int(length / (0.5 * h)) + 1)
        ts = np.linspace(0, 1, k)
        pts = p[None, :] + ts[:, None] * (q - p)[None, :]
        # mark the tube as visited
        for x in pts:
            a, b = _node_of(grid, *x)
            visited[a, b] = True
        visited[i, j] = True
        if length < min_length * h:
            continue
        g = np.array([[_bilinear(G[..., 0], grid, *x), _bilinear(G[..., 1], grid, *x)] for x in pts])
        spread = float(np.max(np.linalg.norm(g[:, None, :] - g[None, :, :], axis=-1)))
        if spread > tau_b:
            continue
        # straightness against the nodes actually visited by the march
        nodes = np.array([[X1[_node_of(grid, *x)], X2[_node_of(grid, *x)]] for x in pts])
        chord = (q - p) / length
        rel = nodes - p
        resid = float(np.max(np.abs(rel[:, 0] * chord[1] - rel[:, 1] * chord[0])))
        mid = 0.5 * (p + q)
        y = (float(_bilinear(G[..., 0], grid, *mid)), float(_bilinear(G[..., 1], grid, *mid)))
        segs.append(BunchSegment(tuple(map(float, p)), tuple(map(float, q)), th, y, resid, spread))
    segs.sort(key=lambda s: (s.theta, s.p))
    return segs


def segments_to_json(segs) -> str:
    return json.dumps([s.to_dict() for s in segs], indent=2)

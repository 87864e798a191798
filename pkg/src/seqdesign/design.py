"""Approximate designs and the algebra around them.

A design is a finitely supported probability measure on the design space.
Coordinates may be NaN, which marks a noise factor that is left
uncontrolled at that point (see ``models.expand_uncontrolled``).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import models as mz
from .models import Box, FiniteSpace, ModelSpec

XTOL = 1e-8
SINGULAR_RTOL = 1e-9
_NAN_SENTINEL = 1e12


def _merge(points: np.ndarray, weights: np.ndarray, xtol: float):
    """Merge points closer than ``xtol`` (sup-norm); locations are weight-averaged."""
    if len(points) < 2:
        return points, weights
    key = np.where(np.isnan(points), _NAN_SENTINEL, points)
    pairs = cKDTree(key).query_pairs(xtol, p=np.inf, output_type="ndarray")
    if len(pairs) == 0:
        return points, weights
    n = len(points)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    ncomp, labels = connected_components(graph, directed=False)
    w = np.bincount(labels, weights=weights, minlength=ncomp)
    # equal-weight average when a merged group carries no mass
    safe = np.where(w > 0, w, 1.0)
    cnt = np.bincount(labels, minlength=ncomp)
    loc = np.empty((ncomp, points.shape[1]))
    for j in range(points.shape[1]):
        num = np.bincount(labels, weights=key[:, j] * weights, minlength=ncomp)
        plain = np.bincount(labels, weights=key[:, j], minlength=ncomp) / cnt
        loc[:, j] = np.where(w > 0, num / safe, plain)
    loc[loc >= _NAN_SENTINEL * 0.5] = np.nan
    first = np.full(ncomp, n)
    np.minimum.at(first, labels, np.arange(n))
    order = np.argsort(first)
    return loc[order], w[order]


@dataclass(frozen=True, eq=False)
class Design:
    """Support points (``m x k``) with non-negative weights summing to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(self.weights, dtype=float).reshape(-1)
        if pts.ndim != 2 or len(pts) != len(w) or len(w) == 0:
            raise ValueError("points and weights must describe at least one atom")
        if np.any(w < -1e-15):
            raise ValueError("weights must be non-negative")
        w = np.clip(w, 0.0, None)
        total = w.sum()
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"weights sum to {total!r}, not 1")
        if len(pts) > 1:
            key = np.where(np.isnan(pts), _NAN_SENTINEL, pts)
            if cKDTree(key).query_pairs(XTOL, p=np.inf):
                raise ValueError("design points must be pairwise distinct; use Design.from_atoms")
        pts.setflags(write=False)
        if abs(total - 1.0) > 1e-13:
            w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_atoms(cls, points, weights, xtol: float = XTOL) -> "Design":
        """Build a design, merging coincident points and normalising weights."""
        pts = np.array(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(weights, dtype=float).reshape(-1)
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        if w.sum() <= 0:
            raise ValueError("total weight must be positive")
        pts, w = _merge(pts, w / w.sum(), xtol)
        return cls(pts, w / w.sum())

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __repr__(self):
        rows = ", ".join(
            f"{tuple(np.round(p, 6).tolist()) if self.dim > 1 else round(float(p[0]), 6)}: {w:.6g}"
            for p, w in zip(self.points, self.weights)
        )
        return f"Design({{{rows}}})"

    def to_text(self) -> str:
        buf = io.StringIO()
        cols = [f"x{j + 1}" for j in range(self.dim)] + ["weight"]
        buf.write("# " + "\t".join(cols) + "\n")
        for p, w in zip(self.points, self.weights):
            buf.write("\t".join(f"{v:.15g}" for v in (*p, w)) + "\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "Design":
        rows = [
            [float(v) for v in line.split()]
            for line in text.splitlines()
            if line.strip() and not line.lstrip().startswith("#")
        ]
        if not rows:
            raise ValueError("no design rows found")
        arr = np.asarray(rows)
        return cls(arr[:, :-1], arr[:, -1])


@dataclass(frozen=True)
class CriterionSpec:
    """``kind`` is ``"D"``, ``"A"`` or ``"phi"`` (the matrix-mean family, ``q < 1``)."""

    kind: str = "D"
    q: float = 0.0

    def __post_init__(self):
        if self.kind not in ("D", "A", "phi"):
            raise ValueError(f"unknown criterion {self.kind!r}")
        if self.kind == "phi" and not self.q < 1:
            raise ValueError("phi_q needs q < 1")

    @property
    def order(self) -> float:
        """Matrix-mean exponent: 0 for D, -1 for A."""
        return {"D": 0.0, "A": -1.0}.get(self.kind, self.q)

    @classmethod
    def parse(cls, text: str) -> "CriterionSpec":
        t = text.strip()
        if t.upper() in ("D", "A"):
            return cls(t.upper())
        if t.lower().startswith("phi"):
            q = t.split(":", 1)[1] if ":" in t else t[3:].lstrip("_=")
            return cls("phi", float(q.replace("q=", "")))
        raise ValueError(f"unknown criterion {text!r}")

    def __str__(self):
        return self.kind if self.kind != "phi" else f"phi:{self.q:g}"


D_OPT = CriterionSpec("D")


def info_matrix(model: ModelSpec, design: Design) -> np.ndarray:
    """Weighted sum of per-point information; uncontrolled coordinates are averaged out."""
    nodes, node_w, owner = mz.expand_uncontrolled(model, design.points)
    J = mz.jacobian(model, nodes)
    w = design.weights[owner] * node_w
    M = (J * w[:, None]).T @ J
    return 0.5 * (M + M.T)


def matrix_criterion(crit: CriterionSpec, M: np.ndarray) -> float:
    eig = np.linalg.eigvalsh(M)
    top = eig[-1]
    if top <= 0 or eig[0] <= SINGULAR_RTOL * top:
        return 0.0
    q = crit.order
    if q == 0:
        return float(np.exp(np.mean(np.log(eig))))
    return float(np.mean(eig**q) ** (1.0 / q))


def criterion_value(crit: CriterionSpec, model: ModelSpec, design: Design) -> float:
    return matrix_criterion(crit, info_matrix(model, design))


def efficiency(crit: CriterionSpec, model: ModelSpec, design: Design, reference: Design) -> float:
    ref = criterion_value(crit, model, reference)
    if ref <= 0:
        raise ValueError("reference design is singular for this model")
    return criterion_value(crit, model, design) / ref


def is_estimable(model: ModelSpec, design: Design) -> bool:
    eig = np.linalg.eigvalsh(info_matrix(model, design))
    return bool(eig[-1] > 0 and eig[0] > SINGULAR_RTOL * eig[-1])


def mix(designs, alphas, xtol: float = XTOL) -> Design:
    """Convex combination; coincident points are merged."""
    designs = list(designs)
    alphas = np.asarray(list(alphas), dtype=float)
    if not designs:
        raise ValueError("mix needs at least one design")
    if len(alphas) != len(designs):
        raise ValueError("one alpha per design")
    if np.any(alphas < 0) or abs(alphas.sum() - 1.0) > 1e-10:
        raise ValueError("alphas must be non-negative and sum to 1")
    keep = [(d, a) for d, a in zip(designs, alphas) if a > 0]
    pts = np.vstack([d.points for d, _ in keep])
    w = np.concatenate([a * d.weights for d, a in keep])
    return Design.from_atoms(pts, w, xtol)


def uniform_design(space: Box | FiniteSpace, m: int) -> Design:
    """Equal-weight design with ``m`` points.

    Intervals: endpoints-inclusive equispacing (``m = 1`` gives the left
    endpoint); periodic intervals omit the right end.  Cubes: the 2^k
    vertices, or the full lattice when ``m`` equals its size.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if isinstance(space, FiniteSpace):
        pts = space.grid()
        if m > len(pts):
            raise ValueError(f"m={m} exceeds the {len(pts)} available points")
        idx = np.unique(np.round(np.linspace(0, len(pts) - 1, m)).astype(int))
        return Design(pts[idx], np.full(len(idx), 1.0 / len(idx)))
    if space.dim == 1:
        lo, hi = space.lower[0], space.upper[0]
        if m == 1:
            pts = np.array([lo])
        elif space.periodic:
            pts = np.linspace(lo, hi, m, endpoint=False)
        else:
            pts = np.linspace(lo, hi, m)
        return Design(pts[:, None], np.full(m, 1.0 / m))
    if m == 2**space.dim:
        pts = space.vertices()
    elif m == space.lattice**space.dim:
        pts = space.grid()
    else:
        raise ValueError(
            f"uniform design on a {space.dim}-cube needs m = {2**space.dim} "
            f"or {space.lattice**space.dim}, got {m}"
        )
    return Design(pts, np.full(len(pts), 1.0 / len(pts)))


def _lex_order(points: np.ndarray) -> np.ndarray:
    return np.lexsort(points.T[::-1])


def round_design(design: Design, n: int, min_one: bool = True) -> list[tuple[np.ndarray, int]]:
    """Largest-remainder apportionment of ``n`` runs.

    With ``min_one`` every support point receives at least one run.  Ties
    go to the lexicographically lower point.
    """
    m = design.size
    if n < 1 or (min_one and n < m):
        raise ValueError(f"cannot spread {n} runs over {m} support points")
    rank = np.empty(m, dtype=int)
    rank[_lex_order(design.points)] = np.arange(m)
    quota = n * design.weights
    counts = np.floor(quota + 1e-9).astype(int)
    if min_one and np.any(counts < 1):
        # pin short points to one run and spread the rest over the others;
        # rescaling can push further points below one, so repeat
        fixed = counts < 1
        while True:
            free = ~fixed
            scaled = quota.copy()
            scaled[free] *= (n - fixed.sum()) / quota[free].sum() if free.any() else 0.0
            low = free & (np.floor(scaled + 1e-9) < 1)
            if not low.any():
                break
            fixed |= low
        quota = np.where(fixed, 1.0, scaled)
        counts = np.floor(quota + 1e-9).astype(int)
    remainder = quota - counts
    short = n - counts.sum()
    if short > 0:
        order = sorted(range(m), key=lambda i: (-round(remainder[i], 12), rank[i]))
        for i in order[:short]:
            counts[i] += 1
    elif short < 0:
        order = sorted(
            (i for i in range(m) if counts[i] > (1 if min_one else 0)),
            key=lambda i: (round(remainder[i], 12), -rank[i]),
        )
        for i in order[:-short]:
            counts[i] -= 1
    return [(design.points[i].copy(), int(counts[i])) for i in range(m) if counts[i] > 0]


def runs_to_points(runs) -> np.ndarray:
    """Expand ``(point, count)`` pairs into a run list, one row per run."""
    return np.vstack([np.repeat(p[None, :], c, axis=0) for p, c in runs])


def support_size(design: Design, wtol: float = 1e-6, xtol: float = XTOL) -> int:
    keep = design.weights >= wtol
    pts, _ = _merge(design.points[keep], design.weights[keep], xtol)
    return len(pts)


def reward(design: Design, true_model: ModelSpec, crit: CriterionSpec, minimal_support: int) -> float:
    """Stage gain: the true-model criterion, zeroed when the support is not minimal."""
    if support_size(design) > minimal_support:
        return 0.0
    return criterion_value(crit, true_model, design)


def design_from_runs(points) -> Design:
    """Empirical design of a run list (equal mass per run)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return Design.from_atoms(pts, np.full(len(pts), 1.0 / len(pts)))

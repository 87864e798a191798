"""Locally optimal approximate designs on candidate grids.

Weights are found by multiplicative updates on the normalised directional
derivative (Titterington's algorithm for D; the Fellman-type power rule
for the matrix means).  On an interval, support points rarely sit on grid
nodes, so the coarse solution is followed by a local exchange that moves
each support point off the grid (see ``_solve``).  Certificates are always
computed on the caller's grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import models as mz
from .design import XTOL, CriterionSpec, D_OPT, Design, _merge, info_matrix
from .models import Box, ModelSpec

log = logging.getLogger(__name__)

GAP_TOL = 1e-7
MAX_ITER = 50_000


class SolverError(RuntimeError):
    pass


@dataclass
class SolveReport:
    design: Design
    criterion_value: float
    equivalence_gap: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list, repr=False)

    def to_text(self) -> str:
        lines = [
            f"# criterion_value\t{self.criterion_value:.15g}",
            f"# equivalence_gap\t{self.equivalence_gap:.6e}",
            f"# iterations\t{self.iterations}",
            f"# converged\t{str(self.converged).lower()}",
        ]
        return "\n".join(lines) + "\n" + self.design.to_text()


def lift(model_or_dims, space, sub_points: np.ndarray, noise_dims=()) -> np.ndarray:
    """Embed points given on a subset of coordinates into the full space.

    Missing noise coordinates become NaN (left uncontrolled), other missing
    coordinates are set to zero.
    """
    dims = list(model_or_dims)
    full = np.zeros((len(sub_points), space.dim))
    for d in noise_dims:
        full[:, d] = np.nan
    full[:, dims] = sub_points
    return full


def _active_union(models) -> list[int]:
    return sorted(set().union(*(m.active_dims for m in models)))


def candidate_grid(models, space=None) -> np.ndarray:
    """Default candidate grid (full coordinates) for one model or several."""
    models = [models] if isinstance(models, ModelSpec) else list(models)
    space = models[0].space if space is None else space
    dims = _active_union(models)
    return lift(dims, space, space.grid(dims), models[0].noise_dims)


def _base_spacing(space, dims) -> float:
    if isinstance(space, Box):
        if len(dims) == 1:
            n = 210 if space.periodic else 201
            return (space.upper[dims[0]] - space.lower[dims[0]]) / (n - (0 if space.periodic else 1))
        return max((space.upper[d] - space.lower[d]) / (space.lattice - 1) for d in dims)
    return 0.0


def _derivative(Fs, coefs, w, q):
    """Combined normalised directional derivative (weighted mean 1) and log-criterion."""
    D = np.zeros(len(w))
    logval = 0.0
    for F, c in zip(Fs, coefs):
        M = (F * w[:, None]).T @ F
        eig, V = np.linalg.eigh(0.5 * (M + M.T))
        if eig[0] <= 1e-14 * max(eig[-1], 1e-300):
            return None, -np.inf
        G = F @ V
        if q == 0:
            D += c * np.sum(G * G / eig, axis=1) / len(eig)
            logval += c * np.mean(np.log(eig))
        else:
            eq = eig**q
            D += c * np.sum(G * G * (eq / eig), axis=1) / eq.sum()
            logval += c * np.log(np.mean(eq)) / q
    return D, logval


def _multiplicative(Fs, coefs, w0, q, tol, max_iter, history=None):
    """Run the multiplicative algorithm; ``tol`` bounds ``max D - 1``."""
    w = np.asarray(w0, dtype=float).copy()
    w /= w.sum()
    power = 1.0 if q >= 0 else 1.0 / (1.0 - q)
    D, logval = _derivative(Fs, coefs, w, q)
    if D is None:
        raise SolverError("model is not estimable on the candidate grid")
    it = 0
    while it < max_iter:
        gap = D.max() - 1.0
        if gap <= tol:
            break
        w *= D**power
        w /= w.sum()
        D, logval = _derivative(Fs, coefs, w, q)
        if history is not None:
            history.append(logval)
        it += 1
    return w, D.max() - 1.0, it


def _local_points(center, dims_lo, dims_hi, step, reach=10):
    """Axis-aligned lines of points through ``center``, clipped to the box."""
    offs = step * np.arange(-reach, reach + 1)
    out = []
    for a in range(len(center)):
        block = np.repeat(center[None, :], len(offs), axis=0)
        block[:, a] += offs
        out.append(block)
    pts = np.vstack(out)
    return np.clip(pts, dims_lo, dims_hi)


def prune(design: Design, wtol: float = 1e-6, xtol: float = XTOL) -> Design:
    """Drop atoms lighter than ``wtol`` and merge points closer than ``xtol``."""
    keep = design.weights >= wtol
    if not keep.any():
        raise ValueError("every weight falls below the pruning tolerance")
    pts, w = _merge(design.points[keep], design.weights[keep], xtol)
    return Design(pts, w / w.sum())


def equivalence_gap(model: ModelSpec, crit: CriterionSpec, design: Design, grid=None) -> float:
    """``max_x d(x, design) - p`` over the grid (D); matrix means use ``p * (max d_q - 1)``."""
    grid = candidate_grid(model) if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    M = info_matrix(model, design)
    eig, V = np.linalg.eigh(M)
    if eig[0] <= 1e-12 * max(eig[-1], 1e-300):
        raise SolverError("design information matrix is singular")
    G = mz.jacobian(model, grid) @ V
    q = crit.order
    p = len(eig)
    if q == 0:
        d = np.sum(G * G / eig, axis=1)
    else:
        d = p * np.sum(G * G * eig ** (q - 1), axis=1) / np.sum(eig**q)
    return float(d.max() - p)


def _compound_gap(models, design, grid, q, coefs):
    Fs = [mz.jacobian(m, grid) for m in models]
    total = np.zeros(len(grid))
    for m, F, c in zip(models, Fs, coefs):
        M = info_matrix(m, design)
        eig, V = np.linalg.eigh(M)
        G = F @ V
        if q == 0:
            total += c * np.sum(G * G / eig, axis=1) / len(eig)
        else:
            total += c * np.sum(G * G * eig ** (q - 1), axis=1) / np.sum(eig**q)
    return float(total.max() - 1.0)


def _solve(models, crit, grid, tol, max_iter, refine, coefs, scale):
    """Shared driver for single-model and geometric-mean problems.

    Non-periodic intervals get a refinement pass: the coarse grid solution
    is reduced to one point per cluster of neighbouring grid nodes, then
    each support point is moved to the maximiser of the directional
    derivative along a local grid whose step shrinks from h/10 to h/10^5,
    re-optimising the weights on the support after every move.
    """
    space = models[0].space
    dims = _active_union(models)
    noise = models[0].noise_dims
    q = crit.order
    sub = grid[:, dims]
    one_d = isinstance(space, Box) and len(dims) == 1 and not space.periodic
    rel_tol = tol / scale

    def jac(points):
        full = lift(dims, space, points, noise)
        return [mz.jacobian(m, full) for m in models]

    history: list[float] = []
    coarse_tol = 1e-4 / scale if (refine and one_d) else rel_tol
    w, gap, iters = _multiplicative(jac(sub), coefs, np.ones(len(sub)), q, coarse_tol, max_iter, history)
    if refine and one_d:
        centers = _cluster_heads(sub, w, 1.01 * _base_spacing(space, dims))
        if centers is not None:
            lo = np.array([space.lower[d] for d in dims])
            hi = np.array([space.upper[d] for d in dims])
            sub, w, extra = _exchange(centers, jac, coefs, q, lo, hi, _base_spacing(space, dims))
            iters += extra
        else:
            w, gap, extra = _multiplicative(jac(sub), coefs, w, q, rel_tol, max_iter, history)
            iters += extra
    pts = lift(dims, space, sub, noise)
    design = prune(Design.from_atoms(pts, w))
    # pruning shifts the weights slightly; re-balance on the kept support
    Fs = [mz.jacobian(m, design.points) for m in models]
    w, _, extra = _multiplicative(Fs, coefs, design.weights, q, 1e-13, 10_000)
    return Design(design.points, w), iters + extra, history


def _cluster_heads(sub, w, radius):
    """Heaviest grid node of each cluster of adjacent massive nodes.

    Returns None when a cluster is wide (a flat optimum such as a uniform
    design), where collapsing clusters would be wrong.
    """
    keep = np.flatnonzero(w > 1e-3 * w.max())
    pts = sub[keep]
    order = np.argsort(pts[:, 0])
    pts, idx = pts[order], keep[order]
    groups, cur = [], [0]
    for i in range(1, len(pts)):
        if pts[i, 0] - pts[i - 1, 0] <= radius:
            cur.append(i)
        else:
            groups.append(cur)
            cur = [i]
    groups.append(cur)
    if any(len(g) > 10 for g in groups):
        return None
    return np.array([pts[max(g, key=lambda i: w[idx[i]])] for g in groups])


def _exchange(centers, jac, coefs, q, lo, hi, spacing, max_rounds=200):
    centers = centers.copy()
    iters = 0

    def polish(c):
        w, _, it = _multiplicative(jac(c), coefs, np.ones(len(c)), q, 1e-13, 10_000)
        return w, it

    w, it = polish(centers)
    iters += it
    step = spacing / 10
    while step >= spacing * 1e-5:
        for _ in range(max_rounds):
            moved = False
            for i in range(len(centers)):
                local = _local_points(centers[i], lo, hi, step)
                F_sup = jac(centers)
                F_loc = jac(local)
                D = _directional(F_sup, F_loc, coefs, w, q)
                j = int(np.argmax(D))
                if D[j] > _directional(F_sup, jac(centers[i : i + 1]), coefs, w, q)[0] + 1e-14:
                    centers[i] = local[j]
                    moved = True
            if not moved:
                break
            w, it = polish(centers)
            iters += it
        step /= 10
    return centers, w, iters


def _directional(F_sup, F_eval, coefs, w, q):
    D = np.zeros(len(F_eval[0]))
    for Fs, Fe, c in zip(F_sup, F_eval, coefs):
        M = (Fs * w[:, None]).T @ Fs
        eig, V = np.linalg.eigh(0.5 * (M + M.T))
        G = Fe @ V
        if q == 0:
            D += c * np.sum(G * G / eig, axis=1) / len(eig)
        else:
            eq = eig**q
            D += c * np.sum(G * G * (eq / eig), axis=1) / eq.sum()
    return D


def solve_locally_optimal(
    model: ModelSpec,
    crit: CriterionSpec = D_OPT,
    grid=None,
    tol: float = GAP_TOL,
    max_iter: int = MAX_ITER,
    refine: bool = True,
) -> SolveReport:
    """Locally optimal design for ``model`` at its nominal parameter.

    ``grid`` defaults to :func:`candidate_grid`; the equivalence gap in the
    report is always measured on that grid.
    """
    grid = candidate_grid(model) if grid is None else _full_grid(model, grid)
    design, iters, history = _solve([model], crit, grid, tol, max_iter, refine, [1.0], model.n_params)
    gap = equivalence_gap(model, crit, design, grid)
    value = _crit_value(crit, model, design)
    converged = gap <= tol
    if not converged:
        log.warning("solver stopped with gap %.3g > tol %.3g for %s", gap, tol, model.id)
    return SolveReport(design, value, gap, iters, converged, history)


def _crit_value(crit, model, design):
    from .design import matrix_criterion

    return matrix_criterion(crit, info_matrix(model, design))


def _full_grid(model, grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[1] != model.space.dim:
        grid = lift(model.active_dims, model.space, grid, model.noise_dims)
    return grid


def robust_geometric_mean_design(
    models,
    crit: CriterionSpec = D_OPT,
    grid=None,
    tol: float = GAP_TOL,
    max_iter: int = MAX_ITER,
    refine: bool = True,
) -> SolveReport:
    """Maximise the geometric mean of the models' efficiencies.

    Normalising each efficiency by the model's optimal value does not move
    the maximiser, so the objective is the average log-criterion.  The
    report's ``criterion_value`` is the geometric mean of the efficiencies
    and its gap is ``max_x sum_k d_k(x) / (K p_k) - 1``.
    """
    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    if len(models) == 1:
        return solve_locally_optimal(models[0], crit, grid, tol, max_iter, refine)
    if grid is None:
        grid = candidate_grid(models)
    coefs = [1.0 / len(models)] * len(models)
    design, iters, history = _solve(models, crit, grid, tol, max_iter, refine, coefs, 1.0)
    gap = _compound_gap(models, design, grid, crit.order, coefs)
    effs = [_crit_value(crit, m, design) / optimal_design(m, crit).criterion_value for m in models]
    value = float(np.exp(np.mean(np.log(effs))))
    return SolveReport(design, value, gap, iters, gap <= tol, history)


@lru_cache(maxsize=None)
def optimal_design(model: ModelSpec, crit: CriterionSpec = D_OPT) -> SolveReport:
    """Cached :func:`solve_locally_optimal` on the default grid."""
    rep = solve_locally_optimal(model, crit)
    if not rep.converged:
        raise SolverError(f"no certified optimal design for {model.id} (gap {rep.equivalence_gap:.3g})")
    return rep


@lru_cache(maxsize=None)
def robust_design(models: tuple[ModelSpec, ...], crit: CriterionSpec = D_OPT) -> SolveReport:
    return robust_geometric_mean_design(list(models), crit)

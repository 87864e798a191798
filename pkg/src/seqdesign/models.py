"""Candidate regression models and their per-point Fisher information.

Every model is Gaussian with constant variance, so the information at a
point is the outer product of the mean-function gradient.  Information is
reported per unit error variance; ``noise_sd`` only matters when responses
are simulated or models are compared by likelihood.

Linear families (linear-dose, multivariate-linear, robust-parameter,
custom-linear) are described by an exponent matrix: row ``r`` of ``terms``
holds the powers of each coordinate in basis function ``r``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

FAMILIES = (
    "emax",
    "linear-dose",
    "exponential-dose",
    "robust-parameter",
    "multivariate-linear",
    "trigonometric",
    "custom-linear",
)

_LINEAR_FAMILIES = {"linear-dose", "robust-parameter", "multivariate-linear", "custom-linear"}


class ModelDomainError(ValueError):
    """Raised when a mean function is evaluated at a singular point."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lower, upper]`` (upper may be open for periodic spaces)."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    lattice: int = 5
    periodic: bool = False

    def __post_init__(self):
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ValueError("lower and upper must have the same non-zero length")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("empty box")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(np.subtract(self.upper, self.lower)))

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.dim:
            return False
        free = np.isnan(x)
        lo = np.asarray(self.lower) - tol
        hi = np.asarray(self.upper) + tol
        inside = (x >= lo) & (x <= hi)
        if self.periodic:
            inside &= x < np.asarray(self.upper)
        return bool(np.all(inside | free))

    def grid(self, dims=None) -> np.ndarray:
        """Candidate grid over the coordinates in ``dims`` (all by default).

        Intervals get 201 equispaced points (210 without the right end for
        periodic spaces); boxes of dimension > 1 get the ``lattice``-per-axis
        lattice, which contains the 2^k vertices.
        """
        dims = range(self.dim) if dims is None else dims
        dims = list(dims)
        if len(dims) == 1:
            lo, hi = self.lower[dims[0]], self.upper[dims[0]]
            if self.periodic:
                return np.linspace(lo, hi, 210, endpoint=False)[:, None]
            return np.linspace(lo, hi, 201)[:, None]
        axes = [np.linspace(self.lower[d], self.upper[d], self.lattice) for d in dims]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def vertices(self, dims=None) -> np.ndarray:
        dims = list(range(self.dim) if dims is None else dims)
        axes = [(self.lower[d], self.upper[d]) for d in dims]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.column_stack([m.ravel() for m in mesh])
        # lexicographic order with -1 before +1 along the first axis
        return pts[np.lexsort(pts.T[::-1])]


@dataclass(frozen=True)
class FiniteSpace:
    """A finite candidate set of design points."""

    points: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if not self.points:
            raise ValueError("finite design space must be non-empty")

    @property
    def dim(self) -> int:
        return len(self.points[0])

    @property
    def diameter(self) -> float:
        pts = np.asarray(self.points, dtype=float)
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        pts = np.asarray(self.points, dtype=float)
        return bool(np.any(np.all(np.abs(pts - x) <= tol, axis=1)))

    def grid(self, dims=None) -> np.ndarray:
        pts = np.asarray(self.points, dtype=float)
        return pts if dims is None else pts[:, list(dims)]

    def vertices(self, dims=None) -> np.ndarray:
        return self.grid(dims)


@dataclass(frozen=True)
class ModelSpec:
    """A candidate regression model ``y = f(x, beta) + noise_sd * eps``.

    ``noise_dims`` lists coordinates that may be left uncontrolled (NaN in a
    design point); ``paired_dims`` gives, for each of them, the control
    coordinate whose sign fixes the interval the value is drawn from.
    """

    id: str
    family: str
    beta: tuple[float, ...]
    space: Box | FiniteSpace
    noise_sd: float = 1.0
    terms: tuple[tuple[int, ...], ...] | None = None
    degree: int | None = None
    noise_dims: tuple[int, ...] = ()
    paired_dims: tuple[int, ...] = ()
    labels: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")
        if self.family in _LINEAR_FAMILIES:
            if not self.terms:
                raise ValueError(f"{self.family} needs a non-empty terms matrix")
            if any(len(t) != self.space.dim for t in self.terms):
                raise ValueError("terms rows must match the space dimension")
        if self.family == "trigonometric" and (self.degree is None or self.degree < 1):
            raise ValueError("trigonometric family needs degree >= 1")
        if len(self.beta) != self.n_params:
            raise ValueError(
                f"{self.id}: beta has length {len(self.beta)}, expected {self.n_params}"
            )
        if len(self.noise_dims) != len(self.paired_dims):
            raise ValueError("noise_dims and paired_dims must have equal length")

    @property
    def n_params(self) -> int:
        if self.family == "emax" or self.family == "exponential-dose":
            return 3
        if self.family == "trigonometric":
            return 2 * self.degree + 1
        return len(self.terms)

    @property
    def is_linear(self) -> bool:
        return self.family in _LINEAR_FAMILIES or self.family == "trigonometric"

    @cached_property
    def exponents(self) -> np.ndarray:
        return np.asarray(self.terms, dtype=float)

    @cached_property
    def active_dims(self) -> tuple[int, ...]:
        """Coordinates the mean function actually depends on."""
        if self.family in _LINEAR_FAMILIES:
            return tuple(int(d) for d in np.flatnonzero(self.exponents.any(axis=0)))
        return tuple(range(self.space.dim))

    def with_beta(self, beta) -> "ModelSpec":
        return ModelSpec(
            self.id, self.family, tuple(beta), self.space, self.noise_sd,
            self.terms, self.degree, self.noise_dims, self.paired_dims, self.labels,
        )


def _as_points(model: ModelSpec, x) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(1, -1) if model.space.dim > 1 else pts.reshape(-1, 1)
    if pts.shape[1] != model.space.dim:
        raise ValueError(f"points have dimension {pts.shape[1]}, space has {model.space.dim}")
    return pts


def _beta(model: ModelSpec, beta) -> np.ndarray:
    b = np.asarray(model.beta if beta is None else beta, dtype=float)
    if b.shape != (model.n_params,):
        raise ValueError(f"beta must have length {model.n_params}")
    return b


def _basis(model: ModelSpec, pts: np.ndarray) -> np.ndarray:
    if model.family == "trigonometric":
        t = pts[:, 0]
        cols = [np.ones_like(t)]
        for l in range(1, model.degree + 1):
            cols += [np.cos(l * t), np.sin(l * t)]
        return np.column_stack(cols)
    # NaN ** 0 == 1, so uncontrolled coordinates a term ignores do no harm
    return np.prod(pts[:, None, :] ** model.exponents[None, :, :], axis=2)


def _check_emax(d, b):
    den = d + b[2]
    if np.any(den == 0):
        raise ModelDomainError("Emax denominator d + beta[2] vanishes")
    return den


def _check_exp(b):
    if b[2] == 0:
        raise ModelDomainError("exponential model needs beta[2] != 0")


def mean_many(model: ModelSpec, X, beta=None) -> np.ndarray:
    """Vectorised mean function over an ``(n, k)`` array of points."""
    pts = _as_points(model, X)
    b = _beta(model, beta)
    if model.family == "emax":
        d = pts[:, 0]
        return b[0] + b[1] * d / _check_emax(d, b)
    if model.family == "exponential-dose":
        _check_exp(b)
        return b[0] + b[1] * np.exp(pts[:, 0] / b[2])
    return _basis(model, pts) @ b


def jacobian(model: ModelSpec, X, beta=None) -> np.ndarray:
    """Rows are the gradients of the mean with respect to ``beta``."""
    pts = _as_points(model, X)
    b = _beta(model, beta)
    if model.family == "emax":
        d = pts[:, 0]
        den = _check_emax(d, b)
        return np.column_stack([np.ones_like(d), d / den, -b[1] * d / den**2])
    if model.family == "exponential-dose":
        _check_exp(b)
        d = pts[:, 0]
        e = np.exp(d / b[2])
        return np.column_stack([np.ones_like(d), e, -b[1] * d * e / b[2] ** 2])
    return _basis(model, pts)


def mean(model: ModelSpec, x, beta=None) -> float:
    return float(mean_many(model, x, beta)[0])


def grad(model: ModelSpec, x, beta=None) -> np.ndarray:
    return jacobian(model, x, beta)[0]


def fisher_point(model: ModelSpec, x, beta=None) -> np.ndarray:
    g = grad(model, x, beta)
    return np.outer(g, g)


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Responses ``y`` observed at the rows of ``X`` during one stage."""

    X: np.ndarray
    y: np.ndarray
    stage: int = 0

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if len(X) != len(y):
            raise ValueError("X and y must have the same number of rows")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n(self) -> int:
        return len(self.y)

    def rows(self) -> list[tuple[np.ndarray, float]]:
        return [(x, float(v)) for x, v in zip(self.X, self.y)]

    def concat(self, other: "ObservationSet") -> "ObservationSet":
        return ObservationSet(np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]), other.stage)

    def groups(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct design points and, per row, the index of its point."""
        uniq, inv = np.unique(self.X, axis=0, return_inverse=True)
        return uniq, inv.reshape(-1)

    @classmethod
    def empty(cls, dim: int, stage: int = 0) -> "ObservationSet":
        return cls(np.zeros((0, dim)), np.zeros(0), stage)


# Two-point Gauss-Legendre integrates every entry of the information
# matrix exactly: each basis function is at most linear in any one noise
# coordinate, so products are at most quadratic in it.
_GL_NODES = np.array([-1.0, 1.0]) / math.sqrt(3.0)


def expand_uncontrolled(model: ModelSpec, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replace uncontrolled (NaN) noise coordinates by quadrature nodes.

    Returns ``(nodes, node_weights, owner)``: each input row becomes a set
    of nodes whose weights sum to one, and ``owner`` maps nodes back to rows.
    Used to compute expected information of designs that leave noise
    factors to chance.
    """
    pts = _as_points(model, X)
    nan = np.isnan(pts)
    if not nan.any():
        return pts, np.ones(len(pts)), np.arange(len(pts))
    pair = dict(zip(model.noise_dims, model.paired_dims))
    active = set(model.active_dims)
    nodes, wts, owner = [], [], []
    for i, row in enumerate(pts):
        free = [d for d in np.flatnonzero(nan[i]) if d in active]
        for d in np.flatnonzero(nan[i]):
            if d not in pair and d in active:
                raise ValueError(f"coordinate {d} is not a noise factor and cannot be NaN")
        if not free:
            nodes.append(row)
            wts.append(1.0)
            owner.append(i)
            continue
        grids = []
        for d in free:
            c = row[pair[d]]
            lo, hi = min(c, 0.0), max(c, 0.0)
            mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
            grids.append(mid + half * _GL_NODES)
        mesh = np.meshgrid(*grids, indexing="ij")
        combos = np.column_stack([m.ravel() for m in mesh])
        block = np.repeat(row[None, :], len(combos), axis=0)
        block[:, free] = combos
        nodes.extend(block)
        wts.extend([1.0 / len(combos)] * len(combos))
        owner.extend([i] * len(combos))
    return np.asarray(nodes), np.asarray(wts), np.asarray(owner)


def complete_point(model: ModelSpec, x, rng) -> np.ndarray:
    """Draw every uncontrolled noise coordinate uniformly on [min(c, 0), max(c, 0)]."""
    row = np.array(x, dtype=float).reshape(-1)
    for d, c in zip(model.noise_dims, model.paired_dims):
        if np.isnan(row[d]):
            a, b = sorted((row[c], 0.0))
            row[d] = rng.uniform(a, b) if b > a else 0.0
    return row


# --- built-in suites -------------------------------------------------------

UNIT_INTERVAL = Box((0.0,), (1.0,))
CUBE3 = Box((-1.0,) * 3, (1.0,) * 3, lattice=5)
# Six factors make a 5-per-axis lattice needlessly large for multilinear
# models, whose optimal designs sit on vertices.
CUBE6 = Box((-1.0,) * 6, (1.0,) * 6, lattice=3)

DOSE_SIGMA = 0.65


def dose_response_suite(delta: float = 3.0) -> list[ModelSpec]:
    if delta <= 0:
        raise ValueError("delta must be positive")
    return [
        ModelSpec("M1", "emax", (0.2, 0.7 * delta, 0.2), UNIT_INTERVAL, DOSE_SIGMA,
                  labels=("Emax",)),
        ModelSpec("M2", "linear-dose", (0.2, 0.6 * delta), UNIT_INTERVAL, DOSE_SIGMA,
                  terms=((0,), (1,)), labels=("linear",)),
        ModelSpec("M3", "exponential-dose", (0.0, 0.2, 1.0 / math.log(1.0 + 3.0 * delta)),
                  UNIT_INTERVAL, DOSE_SIGMA, labels=("exponential",)),
    ]


def _monomial(k: int, *dims: int) -> tuple[int, ...]:
    e = [0] * k
    for d in dims:
        e[d] += 1
    return tuple(e)


def _robust_terms(blocks: dict[int, tuple[int, ...]]) -> tuple[tuple[int, ...], ...]:
    # coordinates: x1, x2, x3 = 0, 1, 2 and z1, z2, z3 = 3, 4, 5
    terms = [_monomial(6), _monomial(6, 0), _monomial(6, 1), _monomial(6, 2)]
    for z, xs in blocks.items():
        terms.append(_monomial(6, z))
        terms += [_monomial(6, x, z) for x in xs]
    return tuple(terms)


_ROBUST_BLOCKS = {
    "M1": {},
    "M2": {3: (0, 1, 2)},
    "M3": {4: (0, 1, 2)},
    "M4": {5: (0, 1, 2)},
    "M5": {3: (0, 1), 5: (0, 2)},
    "M6": {3: (0, 1), 5: (1, 2)},
    "M7": {3: (0, 2), 4: (1, 2)},
    "M_full": {3: (0, 1, 2), 4: (0, 1, 2), 5: (0, 1, 2)},
}


def robust_parameter_model(name: str) -> ModelSpec:
    terms = _robust_terms(_ROBUST_BLOCKS[name])
    return ModelSpec(name, "robust-parameter", (1.0,) * len(terms), CUBE6, 1.0,
                     terms=terms, noise_dims=(3, 4, 5), paired_dims=(0, 1, 2))


def robust_parameter_suite() -> list[ModelSpec]:
    """The seven reduced candidates; ``robust_parameter_model("M_full")`` gives the full model."""
    return [robust_parameter_model(f"M{j}") for j in range(1, 8)]


_MV_EXTRA = {
    "M1": [],
    "M2": [(0, 1), (2, 2)],
    "M3": [(1, 2), (0, 0)],
    "M4": [(0, 1), (0, 2)],
    "M5": [(0, 1), (1, 2)],
    "M6": [(0, 1), (1, 2), (0, 2), (0, 0), (1, 1), (2, 2)],
}


def multivariate_linear_model(name: str) -> ModelSpec:
    terms = [_monomial(3), _monomial(3, 0), _monomial(3, 1), _monomial(3, 2)]
    terms += [_monomial(3, *pair) for pair in _MV_EXTRA[name]]
    return ModelSpec(name, "multivariate-linear", (1.0,) * len(terms), CUBE3, 1.0,
                     terms=tuple(terms))


def multivariate_linear_suite() -> list[ModelSpec]:
    return [multivariate_linear_model(f"M{j}") for j in range(1, 7)]


def trigonometric_model(degree: int) -> ModelSpec:
    return ModelSpec(f"trig{degree}", "trigonometric", (1.0,) * (2 * degree + 1),
                     Box((0.0,), (2 * math.pi,), periodic=True), 1.0, degree=degree)


def trigonometric_suite(max_degree: int = 3) -> list[ModelSpec]:
    return [trigonometric_model(j) for j in range(1, max_degree + 1)]


def custom_linear_model(id: str, terms, space: Box, beta=None, noise_sd: float = 1.0) -> ModelSpec:
    terms = tuple(tuple(int(e) for e in t) for t in terms)
    beta = (1.0,) * len(terms) if beta is None else beta
    return ModelSpec(id, "custom-linear", beta, space, noise_sd, terms=terms)


# --- string ids ------------------------------------------------------------

_ID_RE = re.compile(r"^([a-z\-]+)(?::(.*))?$")


def _parse_params(text: str | None) -> tuple[dict[str, str], list[str]]:
    kv, bare = {}, []
    if text:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "=" in part:
                k, v = part.split("=", 1)
                kv[k.strip()] = v.strip()
            else:
                bare.append(part)
    return kv, bare


def _float_param(kv: dict, key: str, default: float) -> float:
    try:
        return float(kv.get(key, default))
    except ValueError:
        raise ValueError(f"parameter {key!r} must be numeric, got {kv[key]!r}") from None


def builtin_suite(name: str) -> list[ModelSpec]:
    """Candidate list addressed by a string id such as ``dose-response:delta=3``."""
    m = _ID_RE.match(name.strip())
    if not m:
        raise ValueError(f"unknown suite {name!r}")
    family, kv_text = m.groups()
    kv, _ = _parse_params(kv_text)
    if family == "dose-response":
        return dose_response_suite(_float_param(kv, "delta", 3.0))
    if family == "robust-parameter":
        return robust_parameter_suite()
    if family == "multivariate-linear":
        return multivariate_linear_suite()
    if family == "trigonometric":
        return trigonometric_suite(int(_float_param(kv, "degree", 3)))
    raise ValueError(f"unknown suite {name!r}")


def model_from_id(text: str) -> ModelSpec:
    """Single model by id, e.g. ``emax:delta=3``, ``multivariate-linear:M2``."""
    m = _ID_RE.match(text.strip())
    if not m:
        raise ValueError(f"unknown model id {text!r}")
    family, rest = m.groups()
    kv, bare = _parse_params(rest)
    delta = _float_param(kv, "delta", 3.0)
    if family in ("emax", "linear-dose", "exponential-dose"):
        idx = ("emax", "linear-dose", "exponential-dose").index(family)
        return dose_response_suite(delta)[idx]
    if family in ("robust-parameter", "multivariate-linear"):
        name = kv.get("model", bare[0] if bare else None)
        table = _ROBUST_BLOCKS if family == "robust-parameter" else _MV_EXTRA
        if name not in table:
            raise ValueError(f"{family} needs a variant from {sorted(table)}")
        if family == "robust-parameter":
            return robust_parameter_model(name)
        return multivariate_linear_model(name)
    if family == "trigonometric":
        return trigonometric_model(int(_float_param(kv, "degree", 1)))
    raise ValueError(f"unknown model id {text!r}")

"""Model fitting, BIC scoring and the pure-error goodness-of-fit filter."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats
from scipy.optimize import least_squares

from . import models as mz
from .design import design_from_runs, is_estimable
from .models import ModelSpec, ObservationSet

# The single nonlinear parameter (Emax ED50, exponential scale beta2) is
# confined to a box proportional to the largest dose and searched on a log
# scale.  Five deterministic starts are spread evenly over the box.
NONLINEAR_BOUNDS = {"emax": (0.001, 1.5), "exponential-dose": (0.1, 2.0)}
N_STARTS = 5
LM_TOL = 1e-10
LM_MAX_ITER = 200
RSS_ZERO_RTOL = 1e-10


class FitError(ValueError):
    """The data cannot identify the model's parameters."""


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    rss: float
    n: int
    p: int
    converged: bool = True

    def mean(self, model: ModelSpec, X) -> np.ndarray:
        return mz.mean_many(model, X, self.beta_hat)


@dataclass(frozen=True)
class ScoreVector:
    zeta: tuple[int, ...]
    selected: int | None
    checked: tuple[bool, ...]
    bic: tuple[float, ...] = ()
    rejected: tuple[bool, ...] = ()

    def __post_init__(self):
        if sum(self.zeta) > 1:
            raise ValueError("at most one model can score 1")
        if self.selected is not None and self.zeta[self.selected] != 1:
            raise ValueError("the selected model must have zeta = 1")
        if any(z and not c for z, c in zip(self.zeta, self.checked)):
            raise ValueError("an unchecked model cannot score 1")

    def to_dict(self) -> dict:
        return {
            "zeta": list(self.zeta),
            "selected": self.selected,
            "checked": list(self.checked),
            "bic": [_json_float(b) for b in self.bic],
            "rejected": list(self.rejected),
        }


def _json_float(v: float):
    return v if math.isfinite(v) else str(v)


def _scale(y: np.ndarray) -> float:
    return max(1.0, float(np.max(np.abs(y)))) if len(y) else 1.0


def _linear_fit(model, data):
    F = mz.jacobian(model, data.X)
    Q, R = linalg.qr(F, mode="economic")
    beta = linalg.solve_triangular(R, Q.T @ data.y)
    r = data.y - F @ beta
    return beta, float(r @ r)


def _nonlinear_column(family, d, theta):
    if family == "emax":
        return d / (d + theta)
    return np.exp(d / theta)


def _projected_residual(g, y):
    # residual of y on (1, g) in closed form
    gc = g - g.mean()
    yc = y - y.mean()
    ss = gc @ gc
    slope = (gc @ yc) / ss if ss > 0 else 0.0
    return yc - slope * gc, slope


def _nonlinear_fit(model, data):
    """Separable least squares: LM over the bounded nonlinear parameter.

    The intercept and slope are profiled out, so each LM run works on the
    projected residual as a function of one parameter ``u``, mapped onto
    the log-scale box by ``lo + (hi - lo)(1 + sin u) / 2``.
    """
    d, y = data.X[:, 0], data.y
    dmax = max(float(np.max(np.abs(d))), 1e-12)
    lo_f, hi_f = NONLINEAR_BOUNDS[model.family]
    lo, hi = math.log(lo_f * dmax), math.log(hi_f * dmax)

    def theta(u):
        return math.exp(lo + (hi - lo) * (1.0 + math.sin(u)) / 2.0)

    def resid(u):
        return _projected_residual(_nonlinear_column(model.family, d, theta(u[0])), y)[0]

    best = None
    for k in range(N_STARTS):
        u0 = math.asin(2.0 * (k + 0.5) / N_STARTS - 1.0)
        sol = least_squares(resid, np.array([u0]), method="lm", xtol=LM_TOL,
                            ftol=LM_TOL, gtol=LM_TOL, max_nfev=LM_MAX_ITER)
        rss = float(sol.fun @ sol.fun)
        if np.isfinite(rss) and (best is None or rss < best[1]):
            best = (theta(sol.x[0]), rss, sol.status > 0)
    if best is None:
        return np.full(3, np.nan), math.inf, False
    th, rss, ok = best
    g = _nonlinear_column(model.family, d, th)
    _, slope = _projected_residual(g, y)
    b0 = y.mean() - slope * g.mean()
    return np.array([b0, slope, th]), rss, ok


def fit(model: ModelSpec, data: ObservationSet) -> FitResult:
    """Least-squares (Gaussian ML) fit of ``model`` to ``data``.

    Linear families use a QR solve.  Emax and exponential models use
    Levenberg-Marquardt from five deterministic starts inside a bounded
    box for the nonlinear parameter, keeping the lowest residual sum of
    squares.
    """
    n, p = data.n, model.n_params
    if n < p:
        raise FitError(f"{model.id}: {n} observations cannot fit {p} parameters")
    if not is_estimable(model, design_from_runs(data.X)):
        raise FitError(f"{model.id} is not estimable from these design points")
    if model.is_linear:
        beta, rss = _linear_fit(model, data)
        converged = True
    else:
        beta, rss, converged = _nonlinear_fit(model, data)
    if math.isfinite(rss) and math.sqrt(rss / n) <= RSS_ZERO_RTOL * _scale(data.y):
        rss = 0.0
    return FitResult(np.asarray(beta), rss, n, p, converged)


def bic_value(rss: float, n: int, p: int) -> float:
    """``n log(rss/n) + p log n``; exact fits map to ``-inf``."""
    if rss == 0.0:
        return -math.inf
    if not math.isfinite(rss):
        return math.inf
    return n * math.log(rss / n) + p * math.log(n)


def bic(model: ModelSpec, data: ObservationSet) -> float:
    res = fit(model, data)
    return bic_value(res.rss, res.n, res.p)


def _checkable(model: ModelSpec, data: ObservationSet) -> bool:
    return data.n >= model.n_params and is_estimable(model, design_from_runs(data.X))


def _pick(models, scores, eligible) -> int | None:
    best = None
    for j in range(len(models)):
        if not eligible[j]:
            continue
        key = (scores[j], models[j].n_params, j)
        if best is None or key < best[0]:
            best = (key, j)
    if best is None or best[0][0] == math.inf:
        return None
    return best[1]


def _score_vector(k, selected, checked, bics, rejected=None) -> ScoreVector:
    zeta = tuple(int(j == selected) for j in range(k))
    rejected = tuple(rejected) if rejected is not None else (False,) * k
    return ScoreVector(zeta, selected, tuple(checked), tuple(bics), rejected)


def select_bic(models, data: ObservationSet) -> ScoreVector:
    """One-hot score for the lowest-BIC estimable model (ties: fewer parameters, then index)."""
    models = list(models)
    checked = [_checkable(m, data) for m in models]
    bics = [bic(m, data) if c else math.inf for m, c in zip(models, checked)]
    return _score_vector(len(models), _pick(models, bics, checked), checked, bics)


@dataclass(frozen=True)
class GofResult:
    statistic: float
    df: int
    reject: bool
    p_value: float

    def __iter__(self):
        return iter((self.statistic, self.df, self.reject))


def pearson_gof(model: ModelSpec, data: ObservationSet, level: float = 0.05,
                reference: str = "lack-of-fit", fitted: FitResult | None = None) -> GofResult:
    """Pearson statistic ``sum (y - mu_hat)^2 / s2`` with ``s2`` the pure-error variance.

    The statistic equals ``(n - m) + (m - p) F`` where ``F`` is the classical
    lack-of-fit ratio, so the default reference rejects when ``F`` exceeds
    its ``1 - level`` quantile with ``(m - p, n - m)`` degrees of freedom.
    ``reference="chi2"`` compares the statistic with a chi-square on
    ``n - p`` degrees of freedom instead.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    pts, grp = data.groups()
    n, m, p = data.n, len(pts), model.n_params
    if n <= m:
        raise ValueError("pure error needs replicated design points")
    means = np.bincount(grp, weights=data.y) / np.bincount(grp)
    pure = float(np.sum((data.y - means[grp]) ** 2))
    if pure <= 0:
        raise ValueError("pure-error sum of squares is zero")
    s2 = pure / (n - m)
    res = fitted if fitted is not None else fit(model, data)
    stat = res.rss / s2
    df = n - p
    if reference == "chi2":
        pval = float(stats.chi2.sf(stat, df))
    elif reference == "lack-of-fit":
        if m <= p:
            return GofResult(stat, df, False, 1.0)
        f = max(stat - (n - m), 0.0) / (m - p)
        pval = float(stats.f.sf(f, m - p, n - m))
    else:
        raise ValueError(f"unknown reference {reference!r}")
    return GofResult(float(stat), df, pval < level, pval)


def evaluate_stage(models, data: ObservationSet, mode: str = "plain-bic",
                   level: float = 0.05, reference: str = "lack-of-fit") -> ScoreVector:
    """Score the candidates on one stage of data.

    ``gof-filtered``: rejected models score 0 and BIC picks among the rest;
    if every estimable model is rejected no model scores 1.
    """
    models = list(models)
    if mode == "plain-bic":
        return select_bic(models, data)
    if mode != "gof-filtered":
        raise ValueError(f"unknown evaluation mode {mode!r}")
    checked = [_checkable(m, data) for m in models]
    bics, rejected = [], []
    replicated = len(data.groups()[0]) < data.n
    for m, c in zip(models, checked):
        if not c:
            bics.append(math.inf)
            rejected.append(False)
            continue
        res = fit(m, data)
        bics.append(bic_value(res.rss, res.n, res.p))
        # without replicates there is no pure error, so nothing is rejected
        rejected.append(replicated and pearson_gof(m, data, level, reference, res).reject)
    eligible = [c and not r for c, r in zip(checked, rejected)]
    return _score_vector(len(models), _pick(models, bics, eligible), checked, bics, rejected)

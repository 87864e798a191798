"""Monte Carlo trials of the sequential design and the fixed designs it is compared with.

Seeds: every random stream is ``SeedSequence(entropy=seed, spawn_key=(r, t, s))``
for replicate ``r``, stage ``t`` (0 for the pretest) and stream ``s``
(0 = arm draws, 1 = responses).  Results therefore do not depend on the
order in which replicates are executed.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import bandit as bd
from . import models as mz
from .design import (
    CriterionSpec, Design, efficiency, mix, reward, round_design, runs_to_points, support_size,
    uniform_design,
)
from .models import ModelSpec, ObservationSet
from .selection import select_bic
from .solver import optimal_design, robust_design

STREAM_ARM, STREAM_RESPONSE = 0, 1
EVAL_MODES = ("plain-bic", "gof-filtered")

# Fixed dose-response designs (comparison table).  The hybrid design's
# interior points are the Emax and exponential optima for each delta.
STANDARD_DOSES = (0.0, 0.05, 0.2, 0.6, 1.0)
DOSE_TABLE = {
    3.0: {"emax": 0.14285, "exp": 0.67682, "robust": ((0.0, 0.131, 0.678, 1.0), (14, 9, 9, 14))},
    5.0: {"emax": 0.14285, "exp": 0.70560, "robust": ((0.0, 0.129, 0.726, 1.0), (14, 9, 9, 14))},
}


@dataclass(frozen=True)
class SimConfig:
    suite: str = "dose-response:delta=5"
    true_index: int = 0
    criterion: str = "D"
    T: int = 10
    n_t: int | tuple[int, ...] = 15
    rho_mode: str = "default"
    eval_mode: str = "plain-bic"
    gof_level: float = 0.05
    pretest_n: int = 0
    replications: int = 500
    seed: int = 20240101
    budget: int | None = None
    uniform_points: int | None = None
    comparisons: tuple[str, ...] = ("hybrid", "robust", "standard", "uniform")

    def __post_init__(self):
        if isinstance(self.n_t, list):
            object.__setattr__(self, "n_t", tuple(self.n_t))
        if isinstance(self.comparisons, list):
            object.__setattr__(self, "comparisons", tuple(self.comparisons))

    def validate(self, models: list[ModelSpec] | None = None) -> "SimConfig":
        models = mz.builtin_suite(self.suite) if models is None else models
        K = len(models)
        if not 0 <= self.true_index < K:
            raise ValueError(f"true_index {self.true_index} outside the {K}-model suite")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        sizes = (self.n_t,) if isinstance(self.n_t, int) else self.n_t
        if not isinstance(self.n_t, int) and len(sizes) != K:
            raise ValueError(f"n_t table needs {K} entries, got {len(sizes)}")
        if min(sizes) < 1:
            raise ValueError("n_t must be positive")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}")
        if self.eval_mode == "plain-bic" and min(sizes) < max(m.n_params for m in models):
            raise ValueError("plain-bic needs n_t >= the largest parameter count")
        if not 0 < self.gof_level < 1:
            raise ValueError("gof_level must lie in (0, 1)")
        if self.pretest_n < 0 or self.pretest_n >= min(sizes):
            raise ValueError("pretest_n must be >= 0 and smaller than n_t")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.budget is not None and self.budget < 1:
            raise ValueError("budget must be positive")
        bd.parse_rho_mode(self.rho_mode)
        CriterionSpec.parse(self.criterion)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_t"] = self.n_t if isinstance(self.n_t, int) else list(self.n_t)
        d["comparisons"] = list(self.comparisons)
        return d


@dataclass(frozen=True)
class SuiteContext:
    """Everything about a suite that does not depend on the random draws."""

    models: tuple[ModelSpec, ...]
    crit: CriterionSpec
    optimal: tuple[Design, ...]
    unif: Design
    cross_eff: np.ndarray  # cross_eff[true, k] = efficiency of xi*_k under model `true`

    @property
    def K(self) -> int:
        return len(self.models)


def _default_uniform(space, n: int | None) -> Design:
    if n is not None:
        return uniform_design(space, n)
    if space.dim == 1:
        return uniform_design(space, 5)
    return uniform_design(space, 2**space.dim)


@lru_cache(maxsize=None)
def suite_context(suite: str, criterion: str = "D", uniform_points: int | None = None) -> SuiteContext:
    models = tuple(mz.builtin_suite(suite))
    crit = CriterionSpec.parse(criterion)
    opt = tuple(optimal_design(m, crit).design for m in models)
    cross = np.array([[efficiency(crit, m, d, opt[i]) for d in opt] for i, m in enumerate(models)])
    return SuiteContext(models, crit, opt, _default_uniform(models[0].space, uniform_points), cross)


def _delta_of(suite: str) -> float | None:
    if not suite.startswith("dose-response"):
        return None
    kv, _ = mz._parse_params(suite.split(":", 1)[1] if ":" in suite else None)
    return float(kv.get("delta", 3.0))


def table_designs(delta: float) -> dict[str, Design]:
    """Fixed dose-response designs from the comparison table (delta 3 or 5)."""
    if float(delta) not in DOSE_TABLE:
        raise KeyError(f"no tabulated designs for delta={delta}")
    row = DOSE_TABLE[float(delta)]
    col = lambda xs: np.asarray(xs, dtype=float)[:, None]  # noqa: E731
    rpts, rw = row["robust"]
    return {
        "uniform": Design(col(np.linspace(0, 1, 5)), np.full(5, 0.2)),
        "standard": Design(col(STANDARD_DOSES), np.full(5, 0.2)),
        "hybrid": Design(col((0.0, row["emax"], row["exp"], 1.0)), np.array([7, 2, 2, 7]) / 18),
        "robust-table": Design(col(rpts), np.asarray(rw, dtype=float) / 46),
    }


def comparison_designs(suite: str, criterion: str = "D", uniform_points: int | None = None) -> dict[str, Design]:
    """Named fixed designs: uniform, hybrid (equal mix of the optimal designs),
    robust (geometric-mean maximiser) and, for dose-response, standard."""
    ctx = suite_context(suite, criterion, uniform_points)
    K = ctx.K
    out = {
        "uniform": ctx.unif,
        "hybrid": mix(ctx.optimal, [1.0 / K] * K),
        "robust": robust_design(ctx.models, ctx.crit).design,
    }
    delta = _delta_of(suite)
    if delta is not None:
        out["standard"] = Design(np.asarray(STANDARD_DOSES)[:, None], np.full(5, 0.2))
        if delta in DOSE_TABLE:
            out["robust-table"] = table_designs(delta)["robust-table"]
    return out


# --- responses and costs ---------------------------------------------------

def stream(seed: int, r: int, t: int, kind: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(r, t, kind)))


def simulate_response(true_model: ModelSpec, x, rng: np.random.Generator, sd: float | None = None) -> float:
    """``f(x) + sd * z``; ``x`` must be fully specified (see :func:`make_responder`)."""
    sd = true_model.noise_sd if sd is None else sd
    mu = mz.mean(true_model, np.asarray(x, dtype=float).reshape(1, -1))
    return float(mu + sd * rng.standard_normal()) if sd > 0 else float(mu)


def make_responder(true_model: ModelSpec, rng: np.random.Generator):
    """Responder that first draws uncontrolled coordinates, then the response."""

    def respond(x):
        xr = mz.complete_point(true_model, x, rng)
        return xr, simulate_response(true_model, xr, rng)

    return respond


@dataclass(frozen=True)
class CostModel:
    noise_dims: tuple[int, ...] = ()
    base: float = 1.0
    per_factor: float = 5.0


def cost_of_runs(X, cost_model: CostModel) -> float:
    """Sum of ``base + per_factor * m_z`` with ``m_z`` the controlled noise factors of each run."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not cost_model.noise_dims:
        return cost_model.base * len(X)
    controlled = (~np.isnan(X[:, list(cost_model.noise_dims)])).sum(axis=1)
    return float(np.sum(cost_model.base + cost_model.per_factor * controlled))


def cost(design: Design, n: int, cost_model: CostModel) -> float:
    runs = round_design(design, n, min_one=n >= design.size)
    return cost_of_runs(runs_to_points(runs), cost_model)


def cost_model_for(models) -> CostModel:
    return CostModel(tuple(models[0].noise_dims))


# --- single trial -----------------------------------------------------------

@dataclass
class TrialResult:
    records: list[bd.StageRecord]
    design: Design
    state: bd.BanditState
    metrics: dict
    efficiency_by_stage: list[float]
    n_by_stage: list[int]
    misselect_by_stage: list[int]
    pretest: ObservationSet | None = None


def _pretest(cfg: SimConfig, ctx: SuiteContext, true_model: ModelSpec, r: int) -> ObservationSet | None:
    if cfg.pretest_n <= 0:
        return None
    runs = round_design(ctx.unif, cfg.pretest_n, min_one=cfg.pretest_n >= ctx.unif.size)
    respond = make_responder(true_model, stream(cfg.seed, r, 0, STREAM_RESPONSE))
    rows, ys = zip(*(respond(x) for x in runs_to_points(runs)))
    return ObservationSet(np.array(rows), np.array(ys), 0)


def run_trial(cfg: SimConfig, r: int = 0, ctx: SuiteContext | None = None) -> TrialResult:
    """Run the sequential design once (replicate index ``r``) against simulated responses."""
    ctx = suite_context(cfg.suite, cfg.criterion, cfg.uniform_points) if ctx is None else ctx
    true = cfg.true_index
    tm = ctx.models[true]
    ref = ctx.optimal[true]
    pretest = _pretest(cfg, ctx, tm, r)
    minimal = support_size(ref)
    state = bd.init(ctx.K)
    records: list[bd.StageRecord] = []
    eff_series, n_series, miss_series = [], [], []
    total, miss = 0, 0
    for t in range(1, cfg.T + 1):
        left = None if cfg.budget is None else cfg.budget - total
        if left is not None and left <= 0:
            break
        rec, state = bd.run_stage(
            state, ctx.optimal, ctx.unif, cfg.n_t,
            make_responder(tm, stream(cfg.seed, r, t, STREAM_RESPONSE)),
            ctx.models, stream(cfg.seed, r, t, STREAM_ARM),
            eval_mode=cfg.eval_mode, rho_mode=cfg.rho_mode, level=cfg.gof_level,
            pretest=pretest, budget_left=left,
            reward_fn=lambda d: reward(d, tm, ctx.crit, minimal),
        )
        records.append(rec)
        total += rec.data.n
        miss += rec.arm != true
        eff_series.append(efficiency(ctx.crit, tm, bd.aggregate(records), ref))
        n_series.append(total)
        miss_series.append(miss)
    agg = bd.aggregate(records)
    pooled = ObservationSet(np.vstack([r_.data.X for r_ in records]), np.concatenate([r_.data.y for r_ in records]))
    if pretest is not None:
        pooled = pretest.concat(pooled)
    final_sel = select_bic(ctx.models, pooled).selected
    cm = cost_model_for(ctx.models)
    trial_cost = sum(cost_of_runs(r_.planned, cm) for r_ in records)
    if pretest is not None:
        trial_cost += cost_of_runs(runs_to_points(round_design(ctx.unif, cfg.pretest_n, min_one=cfg.pretest_n >= ctx.unif.size)), cm)
    proof = float(sum(r_.data.n * r_.optimal_share * ctx.cross_eff[true, r_.arm] for r_ in records) / total)
    metrics = {
        "replicate": r,
        "true_index": true,
        "stages": len(records),
        "n": total,
        "efficiency": eff_series[-1],
        "proof_bound": proof,
        "acc": int(final_sel == true),
        "bic_selected": -1 if final_sel is None else final_sel,
        "final_model": bd.final_model(state),
        "final_correct": int(bd.final_model(state) == true),
        "misselections": miss,
        "cost": trial_cost,
    }
    return TrialResult(records, agg, state, metrics, eff_series, n_series, miss_series, pretest)


# --- replication ------------------------------------------------------------

@dataclass
class ReplicationSummary:
    mean_efficiency: float
    efficiency_by_T: list[float]
    checkpoints: list[int]
    selection_accuracy: float
    final_model_accuracy: float
    misselect_counts: list[float]
    mean_cost: float
    alpha_hat: float | None = None
    mean_proof_bound: float = math.nan
    comparison_efficiency: dict[str, float] = field(default_factory=dict)
    comparison_cost: dict[str, float] = field(default_factory=dict)
    optimal_cost: float = math.nan
    trials: list[dict] = field(default_factory=list)


def checkpoints_for(cfg: SimConfig) -> list[int]:
    """Sample sizes at which efficiency curves are reported."""
    if isinstance(cfg.n_t, int) and cfg.budget is None:
        return [(cfg.n_t - cfg.pretest_n) * t for t in range(1, cfg.T + 1)]
    step = (cfg.n_t if isinstance(cfg.n_t, int) else min(cfg.n_t)) - cfg.pretest_n
    cap = cfg.budget if cfg.budget is not None else step * cfg.T
    return list(range(step, cap + 1, step))


def _value_at(ns: list[int], vals: list[float], c: int) -> float:
    # value after the last stage finished within c runs (NaN before the first)
    best = math.nan
    for n, v in zip(ns, vals):
        if n <= c:
            best = v
    return best


def _nanmean(xs) -> float:
    xs = np.asarray(xs, dtype=float)
    return float(np.nanmean(xs)) if np.any(~np.isnan(xs)) else math.nan


def _trial_row(args):
    cfg, r = args
    res = run_trial(cfg, r)
    return res.metrics, res.n_by_stage, res.efficiency_by_stage, res.misselect_by_stage


def replicate(cfg: SimConfig, R: int | None = None, seed: int | None = None, workers: int = 1,
              progress=None) -> ReplicationSummary:
    """Run ``R`` independent trials and summarise them.

    The fixed comparison designs are evaluated once each.
    """
    R = cfg.replications if R is None else R
    if R < 1:
        raise ValueError("R must be at least 1")
    if seed is not None:
        cfg = SimConfig(**{**cfg.to_dict(), "seed": seed, "replications": R})
    ctx = suite_context(cfg.suite, cfg.criterion, cfg.uniform_points)
    cfg.validate(list(ctx.models))
    jobs = [(cfg, r) for r in range(R)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_trial_row, jobs, chunksize=max(1, R // (4 * workers))))
    else:
        rows = []
        for j in jobs:
            rows.append(_trial_row(j))
            if progress is not None:
                progress(len(rows), R)
    cps = checkpoints_for(cfg)
    eff_curve = [_nanmean([_value_at(ns, es, c) for _, ns, es, _ in rows]) for c in cps]
    T_max = max(len(ms) for *_, ms in rows)
    miss_curve = [float(np.mean([ms[min(t, len(ms) - 1)] for *_, ms in rows])) for t in range(T_max)]
    metrics = [m for m, *_ in rows]
    tm = ctx.models[cfg.true_index]
    ref = ctx.optimal[cfg.true_index]
    comps = comparison_designs(cfg.suite, cfg.criterion, cfg.uniform_points)
    cm = cost_model_for(ctx.models)
    n_total = int(round(np.mean([m["n"] for m in metrics])))
    comp_eff, comp_cost = {}, {}
    for name in cfg.comparisons:
        if name not in comps:
            continue
        comp_eff[name] = efficiency(ctx.crit, tm, comps[name], ref)
        comp_cost[name] = cost(comps[name], n_total, cm)
    return ReplicationSummary(
        mean_efficiency=float(np.mean([m["efficiency"] for m in metrics])),
        efficiency_by_T=eff_curve,
        checkpoints=cps,
        selection_accuracy=float(np.mean([m["acc"] for m in metrics])),
        final_model_accuracy=float(np.mean([m["final_correct"] for m in metrics])),
        misselect_counts=miss_curve,
        mean_cost=float(np.mean([m["cost"] for m in metrics])),
        mean_proof_bound=float(np.mean([m["proof_bound"] for m in metrics])),
        comparison_efficiency=comp_eff,
        comparison_cost=comp_cost,
        optimal_cost=cost(ref, n_total, cm),
        trials=metrics,
    )


# --- selection-probability diagnostics -------------------------------------

@dataclass
class AlphaEstimate:
    alpha_hat: float
    c_hat: float
    theta: dict = field(default_factory=dict)  # (arm, rho) -> selection frequencies

    def __iter__(self):
        return iter((self.alpha_hat, self.c_hat))


ALPHA_RHOS = (0.0, 0.5, 2.0 / 3.0, 0.75)


def _tied_winners(sc, models) -> list[tuple[int, float]]:
    # exact BIC ties (identical candidates) share the win instead of going to the lower index
    if sc.selected is None:
        return []
    best = sc.bic[sc.selected]
    rejected = sc.rejected or (False,) * len(models)
    tied = [j for j, (b, c, r) in enumerate(zip(sc.bic, sc.checked, rejected))
            if c and not r and models[j].n_params == models[sc.selected].n_params
            and (b == best or abs(b - best) <= 1e-9 * max(1.0, abs(best)))]
    return [(j, 1.0 / len(tied)) for j in tied]


def estimate_alpha(cfg: SimConfig, R: int = 200, seed: int | None = None) -> AlphaEstimate:
    """Monte Carlo selection probabilities on every arm's stage designs.

    ``c_hat`` is the midpoint between the smallest true-model probability
    and the largest wrong-model probability, ``alpha_hat`` half their gap
    (0 when they overlap).
    """
    if R < 1:
        raise ValueError("R must be positive")
    from .selection import evaluate_stage

    seed = cfg.seed if seed is None else seed
    ctx = suite_context(cfg.suite, cfg.criterion, cfg.uniform_points)
    tm = ctx.models[cfg.true_index]
    theta = {}
    for arm in range(ctx.K):
        size = cfg.n_t if isinstance(cfg.n_t, int) else cfg.n_t[arm]
        for k, rho in enumerate(ALPHA_RHOS):
            design = mix([ctx.optimal[arm], ctx.unif], [rho, 1 - rho]) if rho > 0 else ctx.unif
            X = runs_to_points(bd.plan_stage(design, size, allow_partial=True))
            counts = np.zeros(ctx.K)
            for r in range(R):
                rng = stream(seed, r, 1000 * (arm + 1) + k, STREAM_RESPONSE)
                resp = make_responder(tm, rng)
                rows, ys = zip(*(resp(x) for x in X))
                sc = evaluate_stage(ctx.models, ObservationSet(np.array(rows), np.array(ys)),
                                    cfg.eval_mode, cfg.gof_level)
                for j, share in _tied_winners(sc, ctx.models):
                    counts[j] += share
            theta[(arm, rho)] = counts / R
    true_min = min(v[cfg.true_index] for v in theta.values())
    others = [np.delete(v, cfg.true_index) for v in theta.values()]
    false_max = max((float(o.max()) for o in others if len(o)), default=0.0)
    gap = true_min - false_max
    return AlphaEstimate(max(gap / 2.0, 0.0), (true_min + false_max) / 2.0, theta)

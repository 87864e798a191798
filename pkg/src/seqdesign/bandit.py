"""Thompson sampling over candidate models, one design stage at a time.

Each candidate model is an arm with a Beta(a, b) posterior on "this model
wins the stage's selection".  A stage draws from every posterior, runs the
hybrid design built from the winning arm's optimal design, scores the
candidates on the new data and updates the posteriors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .design import Design, mix, round_design, runs_to_points, support_size
from .models import ModelSpec, ObservationSet
from .selection import ScoreVector, evaluate_stage

# responder(x) -> y, or (x_realized, y) when some coordinates are drawn at run time
Responder = Callable[[np.ndarray], "float | tuple[np.ndarray, float]"]


@dataclass(frozen=True)
class BanditState:
    a: tuple[int, ...]
    b: tuple[int, ...]
    N: tuple[int, ...]
    t: int = 1

    def __post_init__(self):
        k = len(self.a)
        if not (len(self.b) == len(self.N) == k) or k == 0:
            raise ValueError("a, b and N must be non-empty and of equal length")
        if min(self.a) < 1 or min(self.b) < 1 or min(self.N) < 0:
            raise ValueError("posterior counters must be >= 1 and pull counts >= 0")
        if sum(self.N) != self.t - 1:
            raise ValueError("pull counts must add up to t - 1")

    @property
    def K(self) -> int:
        return len(self.a)

    def to_dict(self) -> dict:
        return {"a": list(self.a), "b": list(self.b), "N": list(self.N), "t": self.t}

    @classmethod
    def from_dict(cls, d: dict) -> "BanditState":
        return cls(tuple(d["a"]), tuple(d["b"]), tuple(d["N"]), int(d["t"]))


@dataclass(frozen=True)
class StageRecord:
    t: int
    arm: int
    rho: float
    optimal_share: float
    hybrid: Design
    data: ObservationSet
    scores: ScoreVector
    stage_reward: float = math.nan
    planned: np.ndarray | None = None  # run points before uncontrolled coordinates were drawn

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "arm": self.arm,
            "rho": self.rho,
            "optimal_share": self.optimal_share,
            "hybrid": {"points": _nan_list(self.hybrid.points), "weights": self.hybrid.weights.tolist()},
            "X": _nan_list(self.data.X),
            "y": self.data.y.tolist(),
            "scores": self.scores.to_dict(),
            "stage_reward": None if math.isnan(self.stage_reward) else self.stage_reward,
            "planned": None if self.planned is None else _nan_list(self.planned),
        }


def _nan_list(a: np.ndarray) -> list:
    return [[None if math.isnan(v) else v for v in row] for row in np.asarray(a).tolist()]


def init(K: int) -> BanditState:
    if K < 1:
        raise ValueError("need at least one arm")
    return BanditState((1,) * K, (1,) * K, (0,) * K, 1)


def select_arm(state: BanditState, rng: np.random.Generator) -> int:
    """Draw one Beta sample per arm and return the largest (lowest index on ties)."""
    eta = rng.beta(np.asarray(state.a, dtype=float), np.asarray(state.b, dtype=float))
    return int(np.argmax(eta))


def parse_rho_mode(mode) -> tuple[str, float]:
    """Accept ``"default"``, ``"zero"``, ``"constant:c"``, ``("constant", c)`` or a bare number."""
    if isinstance(mode, tuple):
        kind, c = mode
        return parse_rho_mode(f"{kind}:{c}")
    if isinstance(mode, (int, float)) and not isinstance(mode, bool):
        return parse_rho_mode(f"constant:{mode}")
    text = str(mode).strip()
    if text in ("default", "zero"):
        return text, 0.0
    if text.startswith("constant:"):
        c = float(text.split(":", 1)[1])
        if not 0.0 <= c < 1.0:
            raise ValueError(f"constant rho must lie in [0, 1), got {c}")
        return "constant", c
    raise ValueError(f"unknown rho mode {mode!r}")


def rho_schedule(state: BanditState, arm: int, mode="default") -> float:
    """Weight of the arm's optimal design in the stage design.

    ``default`` is ``N/(N+1)`` with ``N`` the arm's pull count in ``state``;
    :func:`run_stage` passes a state whose count already includes the
    current pull.  ``zero`` returns 0 and ``constant:c`` returns ``c``.
    """
    if not 0 <= arm < state.K:
        raise IndexError(f"arm {arm} out of range")
    kind, c = parse_rho_mode(mode)
    if kind == "default":
        n = state.N[arm]
        return n / (n + 1.0)
    return c if kind == "constant" else 0.0


def _collect(X: np.ndarray, responder: Responder, stage: int) -> ObservationSet:
    rows, ys = [], []
    for x in X:
        out = responder(x.copy())
        if isinstance(out, tuple):
            xr, y = out
        else:
            xr, y = x, out
        rows.append(np.asarray(xr, dtype=float).reshape(-1))
        ys.append(float(y))
    return ObservationSet(np.array(rows), np.array(ys), stage)


def update(state: BanditState, scores: ScoreVector, arm: int) -> BanditState:
    """Posterior update; models that could not be checked keep their counters."""
    a, b = list(state.a), list(state.b)
    for j, (z, c) in enumerate(zip(scores.zeta, scores.checked)):
        if c:
            a[j] += z
            b[j] += 1 - z
    N = list(state.N)
    N[arm] += 1
    return BanditState(tuple(a), tuple(b), tuple(N), state.t + 1)


def stage_design(state: BanditState, arm: int, optimal_designs: Sequence[Design],
                 unif: Design, rho_mode="default") -> tuple[float, float, Design]:
    """``(rho, optimal_share, design)`` for a stage that pulled ``arm``."""
    pulled = list(state.N)
    pulled[arm] += 1
    rho = rho_schedule(replace(state, N=tuple(pulled), t=state.t + 1), arm, rho_mode)
    # "zero" means no uniform share at all: the stage runs the optimal design
    share = 1.0 if parse_rho_mode(rho_mode)[0] == "zero" else rho
    if share >= 1.0:
        return rho, share, optimal_designs[arm]
    if share <= 0.0:
        return rho, share, unif
    return rho, share, mix([optimal_designs[arm], unif], [share, 1.0 - share])


def plan_stage(design: Design, n_t: int, allow_partial: bool = False):
    """Round a stage design to ``n_t`` runs; ``allow_partial`` lets small budgets skip points."""
    m = support_size(design)
    if n_t < m and not allow_partial:
        raise ValueError(f"{n_t} runs cannot cover the {m} support points of the stage design")
    return round_design(design, n_t, min_one=n_t >= m)


def run_stage(
    state: BanditState,
    optimal_designs: Sequence[Design],
    unif: Design,
    n_t: int | Sequence[int],
    responder: Responder,
    models: Sequence[ModelSpec],
    rng: np.random.Generator,
    eval_mode: str = "plain-bic",
    rho_mode="default",
    level: float = 0.05,
    pretest: ObservationSet | None = None,
    reward_fn: Callable[[Design], float] | None = None,
    budget_left: int | None = None,
    arm: int | None = None,
) -> tuple[StageRecord, BanditState]:
    """One pass of select, design, observe, evaluate, update.

    ``n_t`` may be a per-arm table.  With a ``pretest`` set the stage runs
    ``n_t - len(pretest)`` new experiments and evaluates the candidates on
    the pretest and stage data together.  ``budget_left`` truncates the
    stage to the remaining runs.  Passing ``arm`` skips the draw (used when
    replaying a recorded session).
    """
    if len(optimal_designs) != state.K or len(models) != state.K:
        raise ValueError("need one optimal design and one model per arm")
    if arm is None:
        arm = select_arm(state, rng)
    size = n_t[arm] if not isinstance(n_t, (int, np.integer)) else int(n_t)
    if pretest is not None:
        size -= pretest.n
    partial = False
    if budget_left is not None and size > budget_left:
        size, partial = budget_left, True
    if size < 1:
        raise ValueError("stage has no runs left after the pretest and budget")
    rho, share, design = stage_design(state, arm, optimal_designs, unif, rho_mode)
    planned = runs_to_points(plan_stage(design, size, allow_partial=partial))
    data = _collect(planned, responder, state.t)
    eval_data = data if pretest is None else pretest.concat(data)
    scores = evaluate_stage(models, eval_data, eval_mode, level)
    reward = reward_fn(design) if reward_fn is not None else math.nan
    record = StageRecord(state.t, arm, rho, share, design, data, scores, reward, planned)
    return record, update(state, scores, arm)


def aggregate(records: Sequence[StageRecord], sizes: Sequence[int] | None = None) -> Design:
    """Run-weighted mixture of the stage designs."""
    if not records:
        raise ValueError("no stages to aggregate")
    sizes = [r.data.n for r in records] if sizes is None else list(sizes)
    total = float(sum(sizes))
    return mix([r.hybrid for r in records], [s / total for s in sizes])


def final_model(state: BanditState) -> int:
    """Most frequently pulled arm (lowest index on ties)."""
    if state.t <= 1:
        raise ValueError("no stage has been run yet")
    return int(np.argmax(state.N))


@dataclass(frozen=True)
class TheoryBounds:
    misselect_bound: float
    eff_bound_plain: float
    eff_bound_gof: float

    def __iter__(self):
        return iter((self.misselect_bound, self.eff_bound_plain, self.eff_bound_gof))


def theory_bounds(K: int, alpha: float, T: int) -> TheoryBounds:
    """Finite-T bounds: expected misselections and the two efficiency floors."""
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 1/2)")
    if T < 2 or K < 1:
        raise ValueError("need T >= 2 and K >= 1")
    a2 = alpha * alpha
    lt = math.log(T)
    miss = K * (2 + 2 / a2) + 8 * lt / a2
    plain = 1 - (8 + a2) * lt / (a2 * T) - (2 + 2 / a2) * K / T
    gof = 1 - (8 * K - 8 + a2) * lt / (a2 * T) - (3 + 4 / a2) * K / T - 1 / T
    return TheoryBounds(miss, plain, gof)

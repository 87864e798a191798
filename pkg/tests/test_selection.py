import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqdesign import harness as hs
from seqdesign import models as mz
from seqdesign.design import Design, mix, round_design, runs_to_points, uniform_design
from seqdesign.models import ObservationSet
from seqdesign.selection import (
    FitError, ScoreVector, bic, bic_value, evaluate_stage, fit, pearson_gof, select_bic,
)

DR3 = mz.builtin_suite("dose-response:delta=3")
DR5 = mz.builtin_suite("dose-response:delta=5")
MV = mz.builtin_suite("multivariate-linear")


def _obs(model, X, rng=None, sd=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = mz.mean_many(model, X)
    if rng is not None:
        y = y + (model.noise_sd if sd is None else sd) * rng.standard_normal(len(X))
    return ObservationSet(X, y)


# --- fitting -----------------------------------------------------------------

def test_linear_exact_fit():
    lin = mz.model_from_id("linear-dose")
    data = ObservationSet(np.array([[0.0]] * 3 + [[1.0]] * 3), [0.2] * 3 + [2.0] * 3)
    res = fit(lin, data)
    np.testing.assert_allclose(res.beta_hat, [0.2, 1.8], atol=1e-12)
    assert res.rss == 0.0


def test_emax_noiseless_fit():
    data = _obs(DR3[0], np.linspace(0, 1, 7))
    res = fit(DR3[0], data)
    assert res.rss < 1e-12 and res.converged
    np.testing.assert_allclose(res.beta_hat, DR3[0].beta, rtol=1e-5)


def test_exponential_noiseless_fit():
    data = _obs(DR5[2], np.repeat([0.0, 0.3, 0.7, 1.0], 2))
    assert fit(DR5[2], data).rss < 1e-12


def test_fit_errors():
    with pytest.raises(FitError):
        fit(DR3[0], _obs(DR3[0], [0.0, 1.0]))
    with pytest.raises(FitError):
        fit(DR3[0], _obs(DR3[0], [0.0, 0.0, 1.0, 1.0]))  # two distinct doses cannot fit three parameters


def test_nonlinear_fit_matches_brute_force_profile():
    rng = np.random.default_rng(5)
    data = _obs(DR5[0], np.repeat(np.linspace(0, 1, 5), 3), rng)
    res = fit(DR5[0], data)
    # profile the nonlinear parameter on a fine grid inside the fitting box
    best = math.inf
    for ed50 in np.geomspace(0.001, 1.5, 4000):
        g = data.X[:, 0] / (data.X[:, 0] + ed50)
        A = np.column_stack([np.ones_like(g), g])
        coef = np.linalg.lstsq(A, data.y, rcond=None)[0]
        best = min(best, float(np.sum((data.y - A @ coef) ** 2)))
    assert res.rss <= best + 1e-9


# --- BIC ---------------------------------------------------------------------

def test_bic_formula():
    assert bic_value(2.0, 10, 3) == pytest.approx(10 * math.log(0.2) + 3 * math.log(10))
    assert bic_value(2.0, 10, 2) < bic_value(2.0, 10, 3)
    # doubling n at fixed rss/n adds p log 2 to the penalty
    penalty = lambda rss, n, p: bic_value(rss, n, p) - n * math.log(rss / n)  # noqa: E731
    assert penalty(4.0, 20, 3) - penalty(2.0, 10, 3) == pytest.approx(3 * math.log(2))
    assert bic_value(0.0, 5, 2) == -math.inf


def test_bic_of_fitted_model():
    rng = np.random.default_rng(1)
    data = _obs(DR3[1], np.repeat([0, 0.5, 1.0], 4), rng)
    res = fit(DR3[1], data)
    assert bic(DR3[1], data) == pytest.approx(bic_value(res.rss, res.n, 2))


def test_select_single_estimable():
    data = _obs(DR3[1], [0.0, 1.0, 0.0, 1.0])
    sc = select_bic(DR3, data)
    assert sc.selected == 1 and sc.checked == (False, True, False)


def test_noiseless_linear_data_selects_linear():
    data = _obs(DR3[1], np.repeat(np.linspace(0, 1, 5), 3))
    sc = select_bic(DR3, data)
    assert sc.selected == 1


def test_all_inestimable():
    data = _obs(DR3[1], [0.5, 0.5])
    sc = select_bic(DR3, data)
    assert sc.selected is None and sc.zeta == (0, 0, 0) and not any(sc.checked)


def test_bic_accuracy_on_standard_design():
    std = Design(np.asarray(hs.STANDARD_DOSES)[:, None], np.full(5, 0.2))
    X = runs_to_points(round_design(std, 150))
    hits = 0
    R = 500
    for r in range(R):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=99, spawn_key=(r,)))
        hits += select_bic(DR5, _obs(DR5[0], X, rng)).selected == 0
    assert hits / R >= 0.9


@given(st.integers(0, 10**6), st.sampled_from(["plain-bic", "gof-filtered"]))
def test_score_vector_is_one_hot(seed, mode):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 6))
    X = rng.choice(np.linspace(0, 1, 5), size=(int(rng.integers(2, 16)), 1))
    X = np.vstack([X, X[:1]])  # at least one replicate
    true = DR3[int(rng.integers(0, 3))]
    sc = evaluate_stage(DR3[:k] if k <= 3 else DR3, _obs(true, X, rng), mode)
    assert sum(sc.zeta) <= 1
    if sc.selected is not None:
        assert sc.zeta[sc.selected] == 1 and sc.checked[sc.selected]
    assert all(c or z == 0 for z, c in zip(sc.zeta, sc.checked))


def test_score_vector_validation():
    with pytest.raises(ValueError):
        ScoreVector((1, 1), 0, (True, True))
    with pytest.raises(ValueError):
        ScoreVector((1, 0), 0, (False, True))
    with pytest.raises(ValueError):
        ScoreVector((0, 1), 0, (True, True))


# --- Pearson GOF -----------------------------------------------------------------

def test_saturated_model_statistic_is_pure_df():
    # a linear model with one parameter per distinct point reproduces the group means
    sat = mz.custom_linear_model("sat", [(0,), (1,), (2,)], mz.UNIT_INTERVAL)
    rng = np.random.default_rng(2)
    X = np.repeat([0.0, 0.5, 1.0], 4)[:, None]
    data = ObservationSet(X, rng.normal(size=12))
    g = pearson_gof(sat, data)
    assert g.statistic == pytest.approx(12 - 3)
    assert g.df == 12 - 3
    assert not g.reject


def test_gof_requires_replicates():
    with pytest.raises(ValueError):
        pearson_gof(DR3[1], _obs(DR3[1], [0.0, 0.5, 1.0]))


def test_gof_invariant_to_constant_shift():
    rng = np.random.default_rng(4)
    m = MV[0]
    X = runs_to_points(round_design(uniform_design(mz.CUBE3, 8), 36))
    data = _obs(m, X, rng)
    shifted = ObservationSet(data.X, data.y + 17.5)
    a, b = pearson_gof(m, data), pearson_gof(m, shifted)
    assert a.statistic == pytest.approx(b.statistic, rel=1e-9)
    assert a.reject == b.reject


def _rejection_rate(truth, fitted, design, R=400, seed=3):
    X = runs_to_points(round_design(design, 36))
    rej = 0
    for r in range(R):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(r,)))
        rej += pearson_gof(fitted, _obs(truth, X, rng)).reject
    return rej / R


def test_gof_power_against_missing_interaction():
    ctx = hs.suite_context("multivariate-linear")
    design = mix([ctx.optimal[3], ctx.unif], [0.5, 0.5])
    # truth M4 has x1*x2 and x1*x3 (coefficient 1); M1 omits both
    assert _rejection_rate(MV[3], MV[0], design) > 0.5


def test_gof_size_is_near_level():
    ctx = hs.suite_context("multivariate-linear")
    rate = _rejection_rate(MV[0], MV[0], ctx.unif)
    assert abs(rate - 0.05) < 0.035


def test_chi2_reference_is_available():
    rng = np.random.default_rng(8)
    X = runs_to_points(round_design(uniform_design(mz.CUBE3, 8), 36))
    g = pearson_gof(MV[0], _obs(MV[0], X, rng), reference="chi2")
    assert g.df == 36 - 4 and 0 <= g.p_value <= 1


# --- stage evaluation ---------------------------------------------------------------

def test_gof_filtered_all_rejected():
    rng = np.random.default_rng(6)
    X = np.repeat(np.linspace(0, 1, 5), 6)[:, None]
    # strongly curved truth that none of the linear candidates can follow
    y = 5 * np.sin(6 * X[:, 0]) + 0.05 * rng.standard_normal(len(X))
    lin = mz.model_from_id("linear-dose")
    sc = evaluate_stage([lin], ObservationSet(X, y), "gof-filtered")
    assert sc.selected is None and sc.zeta == (0,) and sc.rejected == (True,)


def test_plain_mode_is_select_bic():
    rng = np.random.default_rng(9)
    data = _obs(DR3[2], np.repeat(np.linspace(0, 1, 5), 3), rng)
    assert evaluate_stage(DR3, data, "plain-bic") == select_bic(DR3, data)


def test_factorial_stage_leaves_quadratic_models_unchecked():
    X = runs_to_points(round_design(uniform_design(mz.CUBE3, 8), 36))
    sc = evaluate_stage(MV, _obs(MV[0], X, np.random.default_rng(0)), "gof-filtered")
    # every candidate with a squared term aliases it with the intercept (M3 carries x1^2 too)
    assert sc.checked == (True, False, False, True, True, False)
    assert sc.zeta[1] == sc.zeta[2] == sc.zeta[5] == 0


def test_unknown_mode():
    with pytest.raises(ValueError):
        evaluate_stage(DR3, _obs(DR3[1], [0.0, 1.0]), "aic")

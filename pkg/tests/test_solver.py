import itertools

import numpy as np
import pytest

from seqdesign import models as mz
from seqdesign.design import CriterionSpec, D_OPT, Design, criterion_value, uniform_design
from seqdesign.solver import (
    SolverError, equivalence_gap, optimal_design, prune, robust_geometric_mean_design, solve_locally_optimal,
)

LIN = mz.model_from_id("linear-dose")


def _interior(design):
    xs = np.sort(design.points[:, 0])
    return xs[1:-1]


def test_linear_dose_optimum():
    rep = solve_locally_optimal(LIN)
    assert rep.converged
    np.testing.assert_allclose(np.sort(rep.design.points[:, 0]), [0, 1])
    np.testing.assert_allclose(rep.design.weights, 0.5, atol=1e-7)


@pytest.mark.parametrize("mid,target", [
    ("emax:delta=3", 0.14285), ("emax:delta=5", 0.14285),
    ("exponential-dose:delta=3", 0.67682), ("exponential-dose:delta=5", 0.70560),
])
def test_dose_response_optima(mid, target):
    rep = solve_locally_optimal(mz.model_from_id(mid))
    assert rep.converged and rep.design.size == 3
    assert _interior(rep.design)[0] == pytest.approx(target, abs=1e-3)
    np.testing.assert_allclose(rep.design.weights, 1 / 3, atol=1e-6)


def test_emax_interior_matches_closed_form():
    # for three equal-weight points {0, x, 1} the Emax determinant is maximised at x = b/(2b+1)
    b = 0.2
    x = solve_locally_optimal(mz.model_from_id("emax:delta=3")).design
    assert _interior(x)[0] == pytest.approx(b / (2 * b + 1), abs=1e-6)


def test_gap_examples():
    half = Design([[0.0], [1.0]], [0.5, 0.5])
    assert equivalence_gap(LIN, D_OPT, half) <= 1e-6
    assert equivalence_gap(LIN, D_OPT, uniform_design(mz.UNIT_INTERVAL, 5)) > 0
    cube = uniform_design(mz.CUBE3, 8)
    assert abs(equivalence_gap(mz.multivariate_linear_model("M1"), D_OPT, cube)) <= 1e-9


def test_gap_closed_form_for_uniform_on_linear():
    # d(x) = [1, x] M^{-1} [1, x]^T with M from the 5-point uniform design; max at the ends
    u = uniform_design(mz.UNIT_INTERVAL, 5)
    xs = u.points[:, 0]
    M = np.array([[1, xs.mean()], [xs.mean(), np.mean(xs**2)]])
    d1 = np.array([1.0, 1.0]) @ np.linalg.solve(M, [1.0, 1.0])
    assert equivalence_gap(LIN, D_OPT, u) == pytest.approx(d1 - 2, rel=1e-10)


def test_gap_needs_estimable_design():
    with pytest.raises(SolverError):
        equivalence_gap(LIN, D_OPT, Design([[0.3]], [1.0]))


def test_prune():
    d = Design([[0.0], [0.5], [1.0]], [0.5, 1e-12, 0.5 - 1e-12])
    p = prune(d)
    assert p.size == 2
    same = Design([[0.0], [1.0]], [0.4, 0.6])
    q = prune(same)
    np.testing.assert_allclose(q.points, same.points)
    np.testing.assert_allclose(q.weights, same.weights)


def test_prune_keeps_criterion():
    d = Design([[0.0], [0.3], [0.5], [1.0]], [0.33, 0.33, 5e-7, 0.34 - 5e-7])
    m = mz.model_from_id("emax:delta=3")
    before = criterion_value(D_OPT, m, d)
    after = criterion_value(D_OPT, m, prune(d))
    assert abs(after - before) / before < 10 * 1e-6


def test_emax_solution_has_three_points():
    assert optimal_design(mz.model_from_id("emax:delta=3")).design.size == 3


def test_criterion_is_monotone_across_iterations():
    rep = solve_locally_optimal(mz.model_from_id("emax:delta=3"), refine=False, tol=1e-6)
    h = np.asarray(rep.history)
    assert len(h) > 10
    assert np.all(np.diff(h) >= -1e-12)


def test_grid_refinement_is_stable():
    m = mz.model_from_id("emax:delta=3")
    coarse = solve_locally_optimal(m, grid=np.linspace(0, 1, 201), refine=False, tol=1e-6)
    fine = solve_locally_optimal(m, grid=np.linspace(0, 1, 401), refine=False, tol=1e-6)
    assert abs(_interior(coarse.design)[0] - _interior(fine.design)[0]) < 1e-3


@pytest.mark.parametrize("mid", ["linear-dose", "emax:delta=3", "exponential-dose:delta=5"])
def test_solver_beats_brute_force_three_point_search(mid):
    m = mz.model_from_id(mid)
    grid = np.linspace(0, 1, 201)
    rep = solve_locally_optimal(m)
    # exhaustive search over all equal-weight 3-point designs on the grid
    J = mz.jacobian(m, grid[:, None])
    outer = np.einsum("ni,nj->nij", J, J)
    combos = np.array(list(itertools.combinations(range(len(grid)), 3)))
    best = 0.0
    for chunk in np.array_split(combos, 20):
        det = np.linalg.det(outer[chunk].sum(axis=1) / 3)
        best = max(best, float(det.max()))
    assert best ** (1 / m.n_params) <= rep.criterion_value + 1e-6


def test_multivariate_and_robust_parameter_certified():
    for suite in ("multivariate-linear", "robust-parameter"):
        for m in mz.builtin_suite(suite):
            rep = optimal_design(m)
            assert rep.converged and rep.equivalence_gap <= 1e-6


def test_robust_parameter_m1_uses_no_noise_control():
    d = optimal_design(mz.robust_parameter_model("M1")).design
    assert d.size == 8 and np.all(np.isnan(d.points[:, 3:]))


def test_other_criteria_converge():
    m = mz.model_from_id("emax:delta=3")
    for crit in (CriterionSpec("A"), CriterionSpec("phi", -2.0), CriterionSpec("phi", 0.5)):
        rep = solve_locally_optimal(m, crit)
        assert rep.converged
        assert rep.criterion_value >= criterion_value(crit, m, uniform_design(mz.UNIT_INTERVAL, 5))


def test_trigonometric_uniform_is_optimal():
    m = mz.trigonometric_model(2)
    rep = solve_locally_optimal(m)
    assert rep.converged
    np.testing.assert_allclose(rep.design.weights, 1 / rep.design.size, atol=1e-6)


def test_robust_single_model_reduces_to_local():
    m = mz.model_from_id("emax:delta=3")
    a = robust_geometric_mean_design([m])
    b = solve_locally_optimal(m)
    np.testing.assert_allclose(a.design.points, b.design.points)
    np.testing.assert_allclose(a.design.weights, b.design.weights)


def test_robust_design_is_certified_and_balanced():
    rep = robust_geometric_mean_design(mz.builtin_suite("dose-response:delta=3"))
    assert rep.converged and rep.design.size == 4
    assert 0.85 < rep.criterion_value < 1


def test_solver_is_deterministic():
    m = mz.model_from_id("exponential-dose:delta=3")
    a, b = solve_locally_optimal(m), solve_locally_optimal(m)
    assert a.design.to_text() == b.design.to_text()
    assert a.iterations == b.iterations


def test_inestimable_grid_raises():
    with pytest.raises(SolverError):
        solve_locally_optimal(LIN, grid=np.array([[0.5]]))


def test_report_text():
    text = optimal_design(LIN).to_text()
    assert "# equivalence_gap" in text and "# converged\ttrue" in text
    assert Design.from_text(text).size == 2

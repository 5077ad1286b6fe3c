import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from pwer import core
from pwer.core import CorrelationModel, PwerProblem
from pwer.exceptions import SolverError, ValidationError
from pwer.popmodel import make_structure

ALPHA = 0.025
RHO_I = 3 * 0.2 / (2 * 1.4)


def two_pop(pi12, rho=0.0, **kw):
    e = (1 - pi12) / 2
    s = make_structure([({1}, e), ({2}, e), ({1, 2}, pi12)], m=2)
    return PwerProblem(s, CorrelationModel.pair(rho), **kw)


def test_problem_validation():
    s = make_structure([({1}, 0.5), ({2}, 0.5)])
    with pytest.raises(ValidationError):
        PwerProblem(s, CorrelationModel(np.eye(3)))
    with pytest.raises(ValidationError):
        PwerProblem(s, CorrelationModel(np.eye(2)), true_nulls=[])
    with pytest.raises(ValidationError):
        PwerProblem(s, CorrelationModel(np.eye(2)), true_nulls=[3])
    with pytest.raises(ValidationError):
        PwerProblem(s, CorrelationModel(np.eye(2)), weights=[1, 0])
    p = PwerProblem(s, np.eye(2))
    assert p.true_nulls == frozenset({1, 2})


@pytest.mark.parametrize("rho", [-0.5, 0.0, 0.7])
@pytest.mark.parametrize("c", [1.0, 1.96, 2.5])
def test_pwer_without_overlap_is_single_tail(rho, c):
    assert core.pwer_at(two_pop(0.0, rho), c) == pytest.approx(1 - oracles.ncdf(c), abs=1e-15)


def test_pwer_worked_example_level():
    assert core.pwer_at(two_pop(0.2, RHO_I), 2.03) == pytest.approx(0.025, abs=3e-4)


def test_pwer_one_true_null():
    p = two_pop(0.2, RHO_I, true_nulls={1})
    for c in (1.5, 2.0, 2.7):
        assert core.pwer_at(p, c) == pytest.approx(0.6 * (1 - oracles.ncdf(c)), abs=1e-15)


def test_pwer_matches_plain_monte_carlo():
    s = make_structure([({1}, 0.3), ({1, 2}, 0.3), ({1, 2, 3}, 0.4)])
    R = np.array([[1, 0.5, 0.3], [0.5, 1, 0.4], [0.3, 0.4, 1]])
    p = PwerProblem(s, CorrelationModel(R), weights=[1.0, 1.2, 0.9])
    c = 2.0
    ref = oracles.brute_pwer_mc([({1}, 0.3), ({1, 2}, 0.3), ({1, 2, 3}, 0.4)], R,
                                 np.array([1.0, 1.2, 0.9]) * c, 1_000_000, 5)
    se = math.sqrt(ref * (1 - ref) / 1_000_000)
    for backend in ("qmc", "mc"):
        val = core.pwer_at(p, c, backend=backend, n_draws=400_000)
        assert abs(val - ref) < 4 * se + 3 * math.sqrt(ref / 400_000), backend


def test_fwer_examples():
    sidak = oracles.nquantile(math.sqrt(0.975))
    assert core.fwer_at(two_pop(0.5, 0.0), sidak) == pytest.approx(0.025, abs=1e-13)
    single = PwerProblem(make_structure([({1}, 1.0)]), CorrelationModel(np.eye(1)))
    assert core.fwer_at(single, 1.7) == pytest.approx(1 - oracles.ncdf(1.7), abs=1e-15)


def test_pwer_not_above_fwer_and_strictly_below_with_overlap():
    p = two_pop(0.3, 0.4)
    for c in np.linspace(0.5, 4, 15):
        assert core.pwer_at(p, c) < core.fwer_at(p, c)
    full = PwerProblem(make_structure([({1, 2}, 1.0)]), CorrelationModel.pair(0.4))
    for c in (1.0, 2.0):
        assert core.pwer_at(full, c) == pytest.approx(core.fwer_at(full, c), abs=1e-15)


def test_pwer_strictly_decreasing():
    p = two_pop(0.4, 0.2)
    vals = [core.pwer_at(p, c) for c in np.linspace(0, 6, 200)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_solver_limits():
    assert core.solve_critical(two_pop(1e-9), ALPHA).c_star == pytest.approx(1.959964, abs=1e-4)
    assert core.solve_critical(two_pop(1.0), ALPHA).c_star == pytest.approx(
        oracles.nquantile(math.sqrt(0.975)), abs=1e-6)
    res = core.solve_critical(two_pop(0.2, RHO_I), ALPHA)
    assert res.c_star == pytest.approx(2.03, abs=0.01)
    assert abs(res.achieved_level - ALPHA) <= 1e-6
    assert res.bracket == (0.0, 15.0)


def test_solver_errors():
    with pytest.raises(ValidationError):
        core.solve_critical(two_pop(0.2), 0.0)
    with pytest.raises(ValidationError):
        core.solve_critical(two_pop(0.2), 1.0)
    with pytest.raises(SolverError):
        core.solve_critical(two_pop(0.2), 1e-60)
    with pytest.raises(SolverError):
        core.solve_critical(two_pop(0.2), 0.9)


@pytest.mark.parametrize("pi12", [0.01, 0.05, 0.2, 0.5, 0.77, 1.0])
def test_closed_form_matches_quadratic_root(pi12):
    y = oracles.pair_quadratic_root(ALPHA, pi12)
    assert core.closed_form_independent_pair(ALPHA, pi12) == pytest.approx(oracles.nquantile(y), abs=1e-9)


def test_closed_form_examples():
    assert core.closed_form_independent_pair(ALPHA, 1.0) == pytest.approx(
        oracles.nquantile(math.sqrt(0.975)), abs=1e-12)
    assert core.closed_form_independent_pair(ALPHA, 1e-12) == pytest.approx(1.959964, abs=1e-6)
    assert core.closed_form_independent_pair(ALPHA, 0.5) == pytest.approx(2.125, abs=1e-3)
    with pytest.raises(ValidationError):
        core.closed_form_independent_pair(ALPHA, 0.0)


def test_closed_form_monotone():
    grid = np.linspace(0.01, 1.0, 100)
    vals = [core.closed_form_independent_pair(ALPHA, p) for p in grid]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_adjusted_p_examples():
    p = two_pop(0.5)
    c = core.closed_form_independent_pair(ALPHA, 0.5)
    adj = core.adjusted_p(p, [c, 40.0])
    assert adj[0] == pytest.approx(ALPHA, abs=1e-12)
    assert adj[1] == pytest.approx(0.0, abs=1e-15)
    assert core.adjusted_p(p, [2.125, 0.0])[0] == pytest.approx(0.025, abs=1e-4)
    with pytest.raises(ValidationError):
        core.adjusted_p(p, [1.0])
    with pytest.raises(ValidationError):
        core.adjusted_p(p, [1.0, math.nan])


def _random_problem(rng, m):
    masks = rng.choice(np.arange(1, 1 << m), size=rng.integers(1, min(5, (1 << m) - 1) + 1), replace=False)
    union = 0
    for mask in masks:
        union |= int(mask)
    masks = [int(x) for x in masks]
    if union != (1 << m) - 1:
        masks.append(((1 << m) - 1) ^ union)
    w = rng.dirichlet(np.ones(len(masks)))
    A = rng.normal(size=(m, m + 1))
    S = A @ A.T
    d = np.sqrt(np.diag(S))
    return make_structure(list(zip(masks, w)), m=m), S / np.outer(d, d)


def test_duality_random_problems():
    rng = np.random.default_rng(8)
    violations = 0
    for _ in range(30):
        structure, R = _random_problem(rng, 2)
        p = PwerProblem(structure, CorrelationModel(R), weights=rng.uniform(0.5, 2, 2))
        c = core.solve_critical(p, ALPHA).c_star
        z = rng.uniform(0, 4, 2)
        adj = core.adjusted_p(p, z)
        for j in range(2):
            violations += (adj[j] <= ALPHA) != (z[j] / p.weights[j] >= c)
    assert violations == 0


def test_weighted_thresholds():
    p = two_pop(0.3, 0.4, weights=[1.0, 2.0])
    res = core.solve_critical(p, ALPHA)
    assert res.thresholds == pytest.approx((res.c_star, 2 * res.c_star))
    assert core.pwer_at(p, np.array(res.thresholds)) == pytest.approx(ALPHA, abs=1e-9)


def test_mc_backend_within_error():
    s = make_structure([({1}, 0.3), ({1, 2}, 0.3), ({1, 2, 3}, 0.4)])
    R = np.array([[1, 0.5, 0.3], [0.5, 1, 0.4], [0.3, 0.4, 1]])
    p = PwerProblem(s, CorrelationModel(R))
    mc = core.solve_critical(p, ALPHA, backend="mc", n_draws=500_000, seed=2)
    assert abs(mc.achieved_level - ALPHA) <= max(1e-4, 2 * mc.abs_error)
    exact = core.pwer_at(p, mc.c_star, backend="qmc", tol=1e-6)
    assert abs(exact - ALPHA) <= mc.abs_error


def test_exact_backend_refuses_large_unions():
    s = make_structure([({1, 2, 3}, 1.0)])
    with pytest.raises(ValidationError):
        core.pwer_at(PwerProblem(s, np.eye(3)), 2.0, backend="exact")
    with pytest.raises(ValidationError):
        core.pwer_at(PwerProblem(s, np.eye(3)), 2.0, backend="nope")


def test_t_distribution_pair():
    from scipy import stats
    s = make_structure([({1}, 0.5), ({2}, 0.5)])
    p = PwerProblem(s, CorrelationModel(np.eye(2), df=20))
    assert core.solve_critical(p, ALPHA).c_star == pytest.approx(stats.t.isf(ALPHA, 20), abs=1e-8)


def test_sci_bounds():
    res = core.sci_bounds([1.0], [0.5], 2.0, "lower")
    assert res.lower[0] == pytest.approx(0.0) and res.upper[0] == math.inf
    res = core.sci_bounds([1.0, -2.0], [0.5, 1.0], 2.0, "two-sided")
    assert np.all(res.lower <= [1.0, -2.0]) and np.all(res.upper >= [1.0, -2.0])
    up = core.sci_bounds([1.0], [0.5], 2.0, "upper")
    assert up.upper[0] == pytest.approx(2.0) and up.lower[0] == -math.inf
    with pytest.raises(ValidationError):
        core.sci_bounds([1.0], [0.0], 2.0)
    with pytest.raises(ValidationError):
        core.sci_bounds([1.0], [1.0], 2.0, "sideways")


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 3), st.floats(0.5, 4), st.floats(-5, 5))
def test_lower_bound_duality(est, se, c, truth):
    lower = core.sci_bounds([est], [se], c).lower[0]
    assert (lower > truth) == ((est - truth) / se > c)


def test_coverage_single_population():
    p = PwerProblem(make_structure([({1}, 1.0)]), np.eye(1))
    res = core.coverage_sim(p, 200_000, 3)
    assert res.coverage == pytest.approx(0.975, abs=4 * res.se)
    assert res.duality_violations == 0


def test_coverage_increases_with_inflated_c():
    p = two_pop(0.2, RHO_I)
    c = core.solve_critical(p, ALPHA).c_star
    base = core.coverage_sim(p, 50_000, 4, c_star=c)
    wider = core.coverage_sim(p, 50_000, 4, c_star=c + 0.5)
    assert wider.coverage > base.coverage
    assert base.coverage >= 0.975 - 3 * base.se

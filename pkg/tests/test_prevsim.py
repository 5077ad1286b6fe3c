import math

import numpy as np
import pytest

from pwer import core, prevsim, two_pop
from pwer.exceptions import ValidationError
from pwer.popmodel import make_structure, prevalence_mle

ALPHA = 0.025


def _reduce(weights, tested):
    # restrict each stratum to tested hypotheses; strata left empty drop out
    strata = {}
    for s, w in weights:
        t = frozenset(s) & tested
        if t and w > 0:
            strata[t] = strata.get(t, 0.0) + w
    return strata


def _problem(strata, total, rho, tested):
    m = max(max(k) for k in strata)
    s = make_structure([(tuple(sorted(k)), v / total) for k, v in strata.items()], m=m)
    R = np.array([[1.0, rho], [rho, 1.0]])[:m, :m]
    return core.PwerProblem(s, core.CorrelationModel(R), true_nulls=tested)


def oracle_actual_pwer(counts, truth, kind, pi_min=None):
    """Same quantity through the general engine: solve on estimates, evaluate on truth."""
    n1, n2, n12 = counts
    est = prevalence_mle([({1}, n1), ({2}, n2), ({1, 2}, n12)], pi_min=pi_min)
    tested = frozenset(i for i, n in ((1, n1 + n12), (2, n2 + n12)) if n > 0)
    rho = two_pop.correlation_from_sizes(kind, n1, n2, n12)
    est_strata = _reduce(est.estimates, tested)
    total = sum(est_strata.values())
    c = core.solve_critical(_problem(est_strata, total, rho, tested), ALPHA / total).c_star
    true_strata = _reduce([({1}, truth[0]), ({2}, truth[1]), ({1, 2}, truth[2])], tested)
    if not true_strata:
        return 0.0
    ttotal = sum(true_strata.values())
    return ttotal * core.pwer_at(_problem(true_strata, ttotal, rho, tested), c)


@pytest.mark.parametrize("kind", ["i", "ii"])
def test_rows_match_general_engine(kind):
    rng = np.random.default_rng(3)
    truth = np.array([0.3, 0.5, 0.2])
    counts = rng.multinomial(40, truth, size=25)
    counts = np.vstack([counts, [[0, 10, 30], [10, 0, 30], [20, 20, 0], [0, 0, 40], [40, 0, 0]]])
    got = prevsim.actual_pwer_rows(counts, truth, kind, ALPHA)
    for row, value in zip(counts, got):
        assert value == pytest.approx(oracle_actual_pwer(tuple(row), truth, kind), abs=1e-9), row


def test_rows_with_floor_match_general_engine():
    truth = np.array([0.45, 0.45, 0.1])
    for row in ([20, 30, 0], [25, 20, 5], [50, 0, 0]):
        got = prevsim.actual_pwer_one_rep(row, truth, "i", ALPHA, pi_min=0.05)
        assert got == pytest.approx(oracle_actual_pwer(tuple(row), truth, "i", 0.05), abs=1e-9)


def test_floor_rule_matches_popmodel():
    rng = np.random.default_rng(0)
    p = rng.dirichlet([0.3, 0.3, 0.3], size=200)
    got = prevsim.floor_prevalences(p, 0.05)
    for row, g in zip(p, got):
        est = prevalence_mle([({1}, row[0] * 1e9), ({2}, row[1] * 1e9), ({1, 2}, row[2] * 1e9)],
                             pi_min=0.05)
        assert g == pytest.approx([v for _, v in est.estimates], abs=1e-8)


def test_exact_counts_return_alpha():
    truth = np.array([0.3, 0.5, 0.2])
    for kind in ("i", "ii"):
        assert prevsim.actual_pwer_one_rep([300, 500, 200], truth, kind, ALPHA) == pytest.approx(ALPHA, abs=1e-12)


def test_no_overlap_returns_alpha():
    truth = np.array([0.6, 0.4, 0.0])
    for row in ([30, 20, 0], [1, 49, 0], [49, 1, 0]):
        assert prevsim.actual_pwer_one_rep(row, truth, "i", ALPHA) == pytest.approx(ALPHA, abs=1e-12)


def test_missing_overlap_underestimates_multiplicity():
    truth = np.array([0.4, 0.4, 0.2])
    value = prevsim.actual_pwer_one_rep([25, 25, 0], truth, "i", ALPHA)
    # c is unadjusted but the overlap still carries two chances of error
    assert value > ALPHA


def test_inflated_critical_value_lowers_rate():
    single, pair = np.array([0.8]), np.array([0.2])
    rho = np.array([0.2])
    c = prevsim._solve(single, pair, rho, ALPHA)
    assert prevsim._rate(c, single, pair, rho)[0] == pytest.approx(ALPHA, abs=1e-12)
    assert prevsim._rate(c + 0.1, single, pair, rho)[0] < ALPHA


def test_validation():
    with pytest.raises(ValidationError):
        prevsim.actual_pwer_one_rep([0, 0, 0], [0.3, 0.3, 0.4], "i", ALPHA)
    with pytest.raises(ValidationError):
        prevsim.actual_pwer_one_rep([1, 2, 3], [0.3, 0.3, 0.3], "i", ALPHA)
    with pytest.raises(ValidationError):
        prevsim.PrevSimConfig(kind="indep")
    with pytest.raises(ValidationError):
        prevsim.PrevSimConfig.from_dict({"bogus": 1})


def test_grid_points():
    pts = prevsim.grid_points(21)
    assert len(pts) == 231
    assert all(a + b <= 1 + 1e-12 for a, b in pts)


def test_grid_reproducible_and_thread_invariant():
    cfg = prevsim.PrevSimConfig("ii", N=30, n_reps=300, seed=4, grid_size=6)
    a = prevsim.prevalence_effect_grid(cfg)
    b = prevsim.prevalence_effect_grid(cfg, threads=3)
    assert a == b
    text = prevsim.grid_csv(a)
    assert text.startswith("pi1,pi2,mean_pwer,mc_se\n")
    assert len(text.strip().split("\n")) == 22


def test_floor_guards_against_a_missed_overlap():
    base = prevsim.prevalence_effect_grid(prevsim.PrevSimConfig("i", N=50, n_reps=2000, seed=1, grid_size=6))
    floored = prevsim.prevalence_effect_grid(
        prevsim.PrevSimConfig("i", N=50, n_reps=2000, seed=1, grid_size=6, pi_min=0.02))
    for a, b in zip(base, floored):
        pi12 = 1.0 - a.pi1 - a.pi2
        if pi12 < 1e-9 and a.pi1 > 0 and a.pi2 > 0:
            assert b.mean_pwer < a.mean_pwer
        elif min(a.pi1, a.pi2, pi12) > 0.1:
            # every stratum well above the floor: the rule never fires
            assert b.mean_pwer == pytest.approx(a.mean_pwer, abs=1e-12)


def test_error_shrinks_with_sample_size():
    small = prevsim.prevalence_effect_grid(prevsim.PrevSimConfig("i", N=50, n_reps=2000, seed=2, grid_size=6))
    large = prevsim.prevalence_effect_grid(prevsim.PrevSimConfig("i", N=1000, n_reps=2000, seed=3, grid_size=6))
    for a, b in zip(small, large):
        tol = 2 * math.hypot(a.mc_se, b.mc_se)
        assert abs(b.mean_pwer - ALPHA) <= abs(a.mean_pwer - ALPHA) + tol

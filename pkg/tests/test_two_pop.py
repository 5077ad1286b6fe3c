import math

import numpy as np
import pytest

import oracles
from pwer import core, two_pop
from pwer.exceptions import ValidationError
from pwer.mvdist import bvn_cdf
from pwer.two_pop import TwoPopScenario

SIDAK = oracles.nquantile(math.sqrt(0.975))


def corr(C):
    return C[0, 1] / math.sqrt(C[0, 0] * C[1, 1])


def test_scenario_correlation_examples():
    assert two_pop.scenario_correlation(TwoPopScenario("i", 0.0)) == 0.0
    assert two_pop.scenario_correlation(TwoPopScenario("ii", 1.0)) == 1.0
    assert two_pop.scenario_correlation(TwoPopScenario("i", 0.2)) == pytest.approx(0.2143, abs=1e-4)
    assert two_pop.scenario_correlation(TwoPopScenario("indep", 0.6)) == 0.0


@pytest.mark.parametrize("kind", ["i", "ii"])
@pytest.mark.parametrize("pi12", [0.05, 0.2, 0.5, 0.9])
def test_correlation_matches_covariance_assembly(kind, pi12):
    n = 600.0
    e = (1 - pi12) / 2
    C = oracles.two_pop_covariance(kind, e * n, e * n, pi12 * n)
    assert two_pop.scenario_correlation(TwoPopScenario(kind, pi12)) == pytest.approx(corr(C), abs=1e-12)


@pytest.mark.parametrize("kind", ["i", "ii"])
def test_general_sizes_match_covariance_assembly(kind):
    rng = np.random.default_rng(1)
    for _ in range(20):
        n1, n2, n12 = (rng.integers(1, 40, 3) * 6).astype(float)
        C = oracles.two_pop_covariance(kind, n1, n2, n12)
        assert two_pop.correlation_from_sizes(kind, n1, n2, n12) == pytest.approx(corr(C), abs=1e-12)
        assert two_pop.correlation_from_sizes(kind, n1 / 7, n2 / 7, n12 / 7) == pytest.approx(corr(C), abs=1e-12)


def test_variance_factor_matches_assembly():
    assert two_pop.variance_factor(0.5, 0.0) == pytest.approx(4.0)
    assert two_pop.variance_factor(0.4, 0.2) == pytest.approx(3.889, abs=1e-3)
    # Var = 2 sigma^2 v^2 / N
    N = 900.0
    C = oracles.two_pop_covariance("i", 0.4 * N, 0.4 * N, 0.2 * N)
    assert C[0, 0] == pytest.approx(2 * two_pop.variance_factor(0.4, 0.2) / N, rel=1e-12)
    with pytest.raises(ValidationError):
        two_pop.variance_factor(0.0, 0.0)


def test_scenario_ii_dominates_i():
    for p in np.linspace(0, 1, 51):
        assert two_pop.scenario_correlation(TwoPopScenario("ii", p)) >= two_pop.scenario_correlation(
            TwoPopScenario("i", p)) - 1e-15


def test_rewritten_pwer_identity():
    for p in (0.1, 0.4, 0.8):
        sc = TwoPopScenario("i", p)
        rho = two_pop.scenario_correlation(sc)
        prob = two_pop.to_problem(sc)
        for c in (1.5, 2.0, 2.5):
            Phi = oracles.ncdf(c)
            rewritten = 1 - Phi + p * (Phi - bvn_cdf(c, c, rho))
            assert core.pwer_at(prob, c) == pytest.approx(rewritten, abs=1e-12)


def test_critical_values_worked_example():
    c_p, c_f = two_pop.critical_values(TwoPopScenario("i", 0.2))
    assert c_p == pytest.approx(2.03, abs=0.01)
    assert c_f == pytest.approx(2.23, abs=0.01)
    rho = 3 * 0.2 / 2.8
    assert 1 - bvn_cdf(c_f, c_f, rho) == pytest.approx(0.025, abs=1e-6)


def test_critical_values_limits_and_order():
    c_p, c_f = two_pop.critical_values(TwoPopScenario("indep", 1.0))
    assert c_p == pytest.approx(SIDAK, abs=1e-6) and c_f == pytest.approx(SIDAK, abs=1e-6)
    for kind in two_pop.KINDS:
        for p in np.linspace(0, 1, 11):
            c_p, c_f = two_pop.critical_values(TwoPopScenario(kind, p))
            assert c_p <= c_f + 1e-9


def test_sample_size_factor():
    z = oracles.nquantile(0.975)
    assert two_pop.sample_size_factor(z, 0.025, 0.2) == pytest.approx(1.0, abs=1e-12)
    assert two_pop.sample_size_factor(SIDAK, 0.025, 0.2) == pytest.approx(1.21, abs=0.005)
    c = core.closed_form_independent_pair(0.025, 0.4)
    assert two_pop.sample_size_factor(c, 0.025, 0.2) == pytest.approx(1.10, abs=0.015)


def test_required_n():
    assert two_pop.required_n(1.96, 0.2, 0.3) == 88
    assert two_pop.required_n(1.96, 0.2, 1e9) == 1
    a = (oracles.nquantile(0.8) + 2.0) ** 2 / 0.2 ** 2
    assert a / 4 == pytest.approx((oracles.nquantile(0.8) + 2.0) ** 2 / 0.4 ** 2)
    with pytest.raises(ValidationError):
        two_pop.required_n(1.96, 0.2, 0.0)


def test_sweep_rows():
    grid = np.linspace(0, 1, 21)
    for kind in two_pop.KINDS:
        rows = two_pop.inflation_sweep(kind, pi12_grid=grid)
        assert rows[0].q_pwer == pytest.approx(1.0, abs=1e-9)
        assert rows[-1].q_pwer == pytest.approx(rows[-1].q_fwer, abs=1e-9)
    rows = two_pop.inflation_sweep("ii", pi12_grid=grid)
    q = np.array([r.q_pwer for r in rows])
    k = int(np.argmax(q))
    assert 0 < k < len(q) - 1 and q[k] > q[0] and q[k] > q[-1]
    rows = two_pop.inflation_sweep("indep", pi12_grid=grid)
    assert np.ptp([r.q_fwer for r in rows]) < 1e-9
    assert all(b.q_pwer >= a.q_pwer for a, b in zip(rows, rows[1:]))


def test_sweep_csv_format():
    text = two_pop.sweep_csv(two_pop.inflation_sweep("i", pi12_grid=[0.0, 0.5]))
    lines = text.strip().split("\n")
    assert lines[0] == "pi12,q_pwer,q_fwer"
    assert lines[1].startswith("0.000000,1.000000,")
    assert all(len(x.split(".")[1]) == 6 for x in lines[2].split(","))


def test_scenario_validation():
    with pytest.raises(ValidationError):
        TwoPopScenario("iii", 0.2)
    with pytest.raises(ValidationError):
        TwoPopScenario("i", 1.2)

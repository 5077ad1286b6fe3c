"""Two overlapping populations tested in one study.

Three designs are covered:

* ``indep``: two separate studies, independent statistics;
* ``i``: different treatments against a shared control, 1:1 randomization
  in each exclusive stratum and 1:1:1 in the overlap;
* ``ii``: one treatment against control, 1:1 in every stratum, each
  hypothesis tested on the pooled sub-population.

Sub-populations have equal size, so ``pi_{1} = pi_{2} = (1 - pi12) / 2``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import core
from .exceptions import ValidationError
from .mvdist import norm_quantile
from .popmodel import PopulationStructure, make_structure

KINDS = ("indep", "i", "ii")
_ALIASES = {
    "indep": "indep", "independent": "indep", "independent-studies": "indep",
    "i": "i", "different": "i", "shared-control-different-treatments": "i",
    "ii": "ii", "same": "ii", "shared-control-same-treatment": "ii",
}


def normalize_kind(kind: str) -> str:
    try:
        return _ALIASES[str(kind).lower()]
    except KeyError:
        raise ValidationError(f"unknown scenario kind {kind!r}; use one of {KINDS}") from None


@dataclass(frozen=True)
class TwoPopScenario:
    kind: str
    pi12: float
    alpha: float = 0.025
    beta: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        if not 0.0 <= self.pi12 <= 1.0:
            raise ValidationError("pi12 must lie in [0, 1]")
        if not 0.0 < self.alpha < 1.0 or not 0.0 < self.beta < 1.0:
            raise ValidationError("alpha and beta must lie in (0, 1)")

    @property
    def pi_exclusive(self) -> float:
        return (1.0 - self.pi12) / 2.0


def variance_factor(pi_excl: float, pi12: float) -> float:
    """Variance factor ``v^2`` of the weighted mean difference in one sub-population.

    The variance of the treatment-control difference is ``2 sigma^2 v^2 / N``.
    """
    if pi_excl < 0 or pi12 < 0 or pi_excl + pi12 <= 0:
        raise ValidationError("prevalences must be non-negative with a positive sum")
    total = pi_excl + pi12
    v2 = 0.0
    if pi_excl > 0:
        v2 += (pi_excl / total) ** 2 * (2.0 / pi_excl)
    if pi12 > 0:
        v2 += (pi12 / total) ** 2 * (3.0 / pi12)
    return v2


def correlation_from_sizes(kind: str, n1, n2, n12):
    """Correlation of ``(Z_1, Z_2)`` for stratum sizes (counts or prevalences).

    Sizes enter only through their ratios, so counts and prevalences give the
    same answer; arrays are accepted. Without overlap the correlation is 0.
    For scenario ``i`` the variance factors simplify to
    ``v_i^2 = (2 n_{i} + 3 n_{12}) / n_i^2``.
    """
    kind = normalize_kind(kind)
    n1, n2, n12 = (np.asarray(x, dtype=float) for x in (n1, n2, n12))
    if np.any(n1 < 0) or np.any(n2 < 0) or np.any(n12 < 0):
        raise ValidationError("stratum sizes must be non-negative")
    if kind == "indep":
        rho = np.zeros(np.broadcast(n1, n2, n12).shape)
    elif kind == "ii":
        denom = np.sqrt((n1 + n12) * (n2 + n12))
        rho = np.divide(n12, denom, out=np.zeros_like(denom), where=n12 > 0)
    else:
        denom = np.sqrt((2 * n1 + 3 * n12) * (2 * n2 + 3 * n12))
        rho = np.divide(1.5 * n12, denom, out=np.zeros_like(denom), where=n12 > 0)
    return float(rho) if rho.ndim == 0 else rho


def scenario_correlation(scenario: TwoPopScenario) -> float:
    """Correlation under the symmetric design."""
    p = scenario.pi12
    if scenario.kind == "indep":
        return 0.0
    if scenario.kind == "i":
        return 1.5 * p / (1.0 + 2.0 * p)
    return 2.0 * p / (1.0 + p)


def to_structure(scenario: TwoPopScenario) -> PopulationStructure:
    e = scenario.pi_exclusive
    return make_structure([({1}, e), ({2}, e), ({1, 2}, scenario.pi12)], m=2)


def to_problem(scenario: TwoPopScenario) -> core.PwerProblem:
    return core.PwerProblem(to_structure(scenario),
                            core.CorrelationModel.pair(scenario_correlation(scenario)))


def critical_values(scenario: TwoPopScenario) -> tuple[float, float]:
    """``(c_P, c_F)``: critical values controlling the PWER and the FWER."""
    problem = to_problem(scenario)
    c_p = core.solve_critical(problem, scenario.alpha, error_rate="pwer").c_star
    c_f = core.solve_critical(problem, scenario.alpha, error_rate="fwer").c_star
    return c_p, c_f


def sample_size_factor(c: float, alpha: float, beta: float) -> float:
    """Sample size relative to an unadjusted one-sided test at level alpha and power 1-beta."""
    if not 0.0 < alpha < 1.0 or not 0.0 < beta < 1.0:
        raise ValidationError("alpha and beta must lie in (0, 1)")
    zb = norm_quantile(1.0 - beta)
    return ((zb + c) / (zb + norm_quantile(1.0 - alpha))) ** 2


def required_n(c: float, beta: float, delta: float) -> int:
    """Per-population sample size ``ceil((z_{1-beta} + c)^2 / delta^2)`` (unit variance)."""
    if not delta > 0:
        raise ValidationError("delta must be positive")
    if not 0.0 < beta < 1.0:
        raise ValidationError("beta must lie in (0, 1)")
    return max(1, math.ceil((norm_quantile(1.0 - beta) + c) ** 2 / delta ** 2))


@dataclass(frozen=True)
class SweepRow:
    pi12: float
    q_pwer: float
    q_fwer: float
    c_pwer: float
    c_fwer: float


def inflation_sweep(kind: str, alpha: float = 0.025, beta: float = 0.2,
                    pi12_grid: Iterable[float] | None = None) -> list[SweepRow]:
    """Sample-size factors under PWER and FWER control along a grid of overlaps."""
    grid = np.linspace(0.0, 1.0, 101) if pi12_grid is None else np.asarray(list(pi12_grid), float)
    rows = []
    for p in grid:
        sc = TwoPopScenario(kind, float(p), alpha, beta)
        c_p, c_f = critical_values(sc)
        rows.append(SweepRow(float(p), sample_size_factor(c_p, alpha, beta),
                             sample_size_factor(c_f, alpha, beta), c_p, c_f))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pi12", "q_pwer", "q_fwer"])
    for r in rows:
        writer.writerow([f"{r.pi12:.6f}", f"{r.q_pwer:.6f}", f"{r.q_fwer:.6f}"])
    return buf.getvalue()

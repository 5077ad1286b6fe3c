"""Error-rate inflation from estimated prevalences in two-population studies.

Each replication draws stratum counts ``(n_{1}, n_{2}, n_{12})`` from the
multinomial with the true prevalences, solves the critical value from the
estimated prevalences and the correlation implied by those counts, and
evaluates the PWER that this critical value actually yields under the true
prevalences. A hypothesis whose sub-population received no patients is not
tested and never rejected.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
from scipy import special

from . import mvdist
from .exceptions import ValidationError
from .two_pop import correlation_from_sizes, normalize_kind

_BISECT_ITER = 44


@dataclass(frozen=True)
class PrevSimConfig:
    kind: str = "i"
    N: int = 50
    alpha: float = 0.025
    n_reps: int = 10_000
    seed: int = 0
    pi_min: float | None = None
    grid_size: int = 21

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        if self.kind == "indep":
            raise ValidationError("prevalence simulation needs scenario 'i' or 'ii'")
        if not isinstance(self.N, (int, np.integer)) or self.N < 1:
            raise ValidationError("N must be a positive integer")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.n_reps < 1:
            raise ValidationError("n_reps must be positive")
        if self.pi_min is not None and not 0.0 < self.pi_min < 1.0 / 3.0:
            raise ValidationError("pi_min must lie in (0, 1/3)")
        if self.grid_size < 2:
            raise ValidationError("grid_size must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "PrevSimConfig":
        extra = set(data) - set(cls.__dataclass_fields__)
        if extra:
            raise ValidationError(f"unknown config keys {sorted(extra)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ValidationError(f"bad prev-sim config: {exc}") from None


def floor_prevalences(p: np.ndarray, pi_min: float) -> np.ndarray:
    """Row-wise floor-then-rescale, the rule of :func:`popmodel.prevalence_mle`."""
    p = np.asarray(p, dtype=float)
    k = p.shape[1]
    floored = np.zeros_like(p, dtype=bool)
    out = p.copy()
    for _ in range(k):
        free_mass = 1.0 - pi_min * floored.sum(axis=1)
        free_total = np.where(floored, 0.0, p).sum(axis=1)
        scale = np.divide(free_mass, free_total, out=np.zeros_like(free_mass),
                          where=free_total > 0)
        out = np.where(floored, pi_min, p * scale[:, None])
        new = ~floored & (out < pi_min)
        if not new.any():
            break
        floored |= new
    return out


def _masses(weights: np.ndarray, tested1: np.ndarray, tested2: np.ndarray):
    """Mass of strata hit by exactly one tested hypothesis, and by both."""
    w1, w2, w12 = weights[:, 0], weights[:, 1], weights[:, 2]
    both = tested1 & tested2
    single = w1 * tested1 + w2 * tested2 + w12 * (tested1 ^ tested2)
    return single, np.where(both, w12, 0.0)


def _rate(c, single, pair, rho):
    tail = special.ndtr(-c)
    union = 2.0 * tail - mvdist.bvn_upper(c, c, rho)
    return single * tail + pair * union


def _solve(single, pair, rho, alpha):
    """Vectorized bisection for ``single (1 - Phi(c)) + pair P(union) = alpha``."""
    total = single + pair
    # the rate lies between total * tail and 2 * total * tail, a bracket of width < 0.6
    ok = total > alpha
    lo = np.where(ok, special.ndtri(1.0 - alpha / np.where(ok, total, 1.0)), 0.0)
    hi = np.where(ok, special.ndtri(1.0 - alpha / (2.0 * np.where(ok, total, 1.0))), 0.0)
    lo = np.maximum(lo - 1e-9, 0.0)
    hi = hi + 1e-9
    for _ in range(_BISECT_ITER):
        mid = 0.5 * (lo + hi)
        above = _rate(mid, single, pair, rho) > alpha
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    return np.where(ok, hi, 0.0)


def actual_pwer_rows(counts: np.ndarray, true_pis, kind: str, alpha: float,
                     pi_min: float | None = None) -> np.ndarray:
    """Actual PWER for each row ``(n_{1}, n_{2}, n_{12})`` of counts."""
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    if counts.shape[1] != 3 or np.any(counts < 0):
        raise ValidationError("counts must be rows of three non-negative numbers")
    total = counts.sum(axis=1)
    if np.any(total <= 0):
        raise ValidationError("every count row needs a positive total")
    true_pis = np.asarray(true_pis, dtype=float)
    if true_pis.shape != (3,) or np.any(true_pis < 0) or abs(true_pis.sum() - 1) > 1e-9:
        raise ValidationError("true_pis must be three prevalences summing to 1")
    kind = normalize_kind(kind)
    est = counts / total[:, None]
    if pi_min is not None:
        est = floor_prevalences(est, pi_min)
    n1, n2, n12 = counts.T
    tested1 = n1 + n12 > 0
    tested2 = n2 + n12 > 0
    rho = correlation_from_sizes(kind, n1, n2, n12)
    single, pair = _masses(est, tested1, tested2)
    c_hat = _solve(single, pair, rho, alpha)
    single_t, pair_t = _masses(np.broadcast_to(true_pis, est.shape), tested1, tested2)
    return _rate(c_hat, single_t, pair_t, rho)


def actual_pwer_one_rep(counts, true_pis, kind: str, alpha: float,
                        pi_min: float | None = None) -> float:
    """PWER under the true prevalences when the critical value uses estimates from ``counts``."""
    return float(actual_pwer_rows(np.asarray(counts)[None, :], true_pis, kind, alpha, pi_min)[0])


def grid_points(grid_size: int = 21) -> list[tuple[float, float]]:
    """``(pi_{1}, pi_{2})`` on a regular grid with ``pi_{1} + pi_{2} <= 1``."""
    axis = np.linspace(0.0, 1.0, grid_size)
    return [(float(a), float(b)) for a in axis for b in axis if a + b <= 1.0 + 1e-12]


@dataclass(frozen=True)
class GridCell:
    pi1: float
    pi2: float
    mean_pwer: float
    mc_se: float


def simulate_point(config: PrevSimConfig, pi1: float, pi2: float, index: int) -> GridCell:
    pi12 = max(0.0, 1.0 - pi1 - pi2)
    truth = np.array([pi1, pi2, pi12])
    truth /= truth.sum()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(index,)))
    draws = rng.multinomial(config.N, truth, size=config.n_reps)
    rows, inverse = np.unique(draws, axis=0, return_inverse=True)
    values = actual_pwer_rows(rows, truth, config.kind, config.alpha, config.pi_min)
    per_rep = values[np.ravel(inverse)]
    se = per_rep.std(ddof=1) / math.sqrt(len(per_rep)) if len(per_rep) > 1 else 0.0
    return GridCell(pi1, pi2, float(per_rep.mean()), float(se))


def prevalence_effect_grid(config: PrevSimConfig, threads: int = 1) -> list[GridCell]:
    """Mean actual PWER over replications at every grid point.

    Replications at grid point ``k`` use the child seed ``(seed, k)``, so the
    grid is the same for any thread count.
    """
    points = grid_points(config.grid_size)
    if threads <= 1:
        return [simulate_point(config, a, b, k) for k, (a, b) in enumerate(points)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda kp: simulate_point(config, *kp[1], kp[0]),
                             enumerate(points)))


def grid_csv(cells) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pi1", "pi2", "mean_pwer", "mc_se"])
    for c in cells:
        writer.writerow([f"{c.pi1:.6f}", f"{c.pi2:.6f}", f"{c.mean_pwer:.6f}", f"{c.mc_se:.6f}"])
    return buf.getvalue()

"""Population-wise and family-wise error rates of single-step tests.

Hypothesis ``H_i`` is rejected when ``Z_i > w_i * c``. The population-wise
error rate averages, over disjoint strata, the probability that some true
null affecting the stratum is rejected; the family-wise error rate is the
probability that any true null is rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special, stats

from . import mvdist
from .exceptions import SolverError, ValidationError
from .popmodel import PopulationStructure, mask_indices

BRACKET = (0.0, 15.0)
PRUNE_BELOW = 1e-15
BACKENDS = ("auto", "exact", "qmc", "mc")


@dataclass(frozen=True, eq=False)
class CorrelationModel:
    """Joint null distribution of the test statistics: correlation + df."""

    matrix: np.ndarray
    df: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "matrix", mvdist.check_correlation(self.matrix))
        object.__setattr__(self, "df", mvdist._check_df(self.df))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def independent(cls, m: int, df: float = math.inf) -> "CorrelationModel":
        return cls(np.eye(m), df)

    @classmethod
    def pair(cls, rho: float, df: float = math.inf) -> "CorrelationModel":
        return cls(np.array([[1.0, rho], [rho, 1.0]]), df)


@dataclass(frozen=True, eq=False)
class PwerProblem:
    """Everything needed to evaluate the error rates of a single-step test.

    ``true_nulls`` holds 1-based indices and defaults to the global null.
    ``weights`` scale the common critical value per hypothesis.
    """

    structure: PopulationStructure
    corr: CorrelationModel
    true_nulls: frozenset[int] | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        m = self.structure.m
        if not isinstance(self.corr, CorrelationModel):
            object.__setattr__(self, "corr", CorrelationModel(self.corr))
        if self.corr.dim != m:
            raise ValidationError(f"correlation has dimension {self.corr.dim}, structure has m={m}")
        nulls = frozenset(range(1, m + 1)) if self.true_nulls is None else frozenset(
            int(i) for i in self.true_nulls)
        if not nulls:
            raise ValidationError("true_nulls must not be empty")
        if min(nulls) < 1 or max(nulls) > m:
            raise ValidationError(f"true_nulls must lie in 1..{m}")
        object.__setattr__(self, "true_nulls", nulls)
        w = np.ones(m) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (m,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValidationError("weights must be m positive finite numbers")
        object.__setattr__(self, "weights", w)

    @property
    def m(self) -> int:
        return self.structure.m

    def null_mask(self) -> int:
        mask = 0
        for i in self.true_nulls:
            mask |= 1 << (i - 1)
        return mask


@dataclass(frozen=True)
class CriticalValueResult:
    c_star: float
    achieved_level: float
    iterations: int
    bracket: tuple[float, float]
    thresholds: tuple[float, ...]
    abs_error: float = 0.0
    backend: str = "exact"
    error_rate: str = "pwer"

    def to_dict(self) -> dict:
        return {
            "c_star": self.c_star,
            "achieved_level": self.achieved_level,
            "iterations": self.iterations,
            "bracket": list(self.bracket),
            "thresholds": list(self.thresholds),
            "abs_error": self.abs_error,
            "backend": self.backend,
            "error_rate": self.error_rate,
        }


class _Engine:
    """Evaluates error rates for one problem with a fixed backend.

    The ``mc`` backend samples one ensemble up front and reuses it for every
    threshold (common random numbers), so estimates are monotone in ``c``.
    The ``qmc`` backend keeps a fixed lattice seed for the same reason.
    """

    def __init__(self, problem: PwerProblem, backend="auto", tol=1e-5, seed=0,
                 n_draws=1_000_000, threads=1):
        if backend not in BACKENDS:
            raise ValidationError(f"backend must be one of {BACKENDS}")
        self.problem = problem
        self.tol = tol
        self.seed = seed
        nulls = problem.null_mask()
        self.pwer_terms = []
        for mask, pi in problem.structure.strata:
            if pi < PRUNE_BELOW:
                continue
            idx = mask_indices(mask & nulls)
            if idx:
                self.pwer_terms.append((pi, idx))
        self.fwer_idx = mask_indices(nulls)
        df = problem.corr.df
        # pair unions have a closed form for normal statistics; larger ones need integration
        self._pair_exact = math.isinf(df)
        self._exact_ok = {
            "pwer": all(self._is_exact(idx) for _, idx in self.pwer_terms),
            "fwer": self._is_exact(self.fwer_idx),
        }
        if backend == "exact" and not any(self._exact_ok.values()):
            raise ValidationError("exact backend needs normal statistics and unions of size <= 2")
        self.requested = backend
        if backend == "auto":
            backend = "exact" if all(self._exact_ok.values()) else "qmc"
        self.backend = backend
        self._cache: dict = {}
        if backend == "mc":
            self.draws = mvdist.sample_joint(problem.corr.matrix, df, n_draws, seed,
                                             threads=threads)
            w = problem.weights
            self._scaled = self.draws / w[None, :]
            self._sorted = {}

    def _is_exact(self, idx) -> bool:
        return len(idx) <= 1 or (len(idx) == 2 and self._pair_exact)

    def _method(self, kind) -> str:
        if self.backend in ("mc", "qmc") and self.requested != "auto":
            return self.backend
        if self.requested == "exact" and not self._exact_ok[kind]:
            raise ValidationError("exact backend needs normal statistics and unions of size <= 2")
        return "exact" if self._exact_ok[kind] else "qmc"

    # -- unions ------------------------------------------------------------

    def _union(self, idx, thr):
        """``P(any Z_i > thr_i, i in idx)`` and its error estimate."""
        R = self.problem.corr.matrix
        df = self.problem.corr.df
        if len(idx) == 1:
            t = thr[idx[0]]
            if math.isinf(df):
                return float(special.ndtr(-t)), 0.0
            return float(stats.t.sf(t, df)), 0.0
        if len(idx) == 2 and self._pair_exact and self.requested != "qmc":
            i, j = idx
            both = mvdist.bvn_upper(thr[i], thr[j], R[i, j])
            return float(special.ndtr(-thr[i]) + special.ndtr(-thr[j]) - both), 0.0
        sub = R[np.ix_(idx, idx)]
        est = mvdist.mv_cdf(thr[list(idx)], sub, df, tol=self.tol, seed=self.seed,
                            method="qmc")
        return 1.0 - est.value, est.abs_error

    def _max_sorted(self, idx):
        key = tuple(idx)
        if key not in self._sorted:
            self._sorted[key] = np.sort(self._scaled[:, list(idx)].max(axis=1))
        return self._sorted[key]

    def _mc_rate(self, terms, c_scalar, thr):
        n = self.draws.shape[0]
        if c_scalar is not None:
            return float(sum(
                pi * (1.0 - np.searchsorted(self._max_sorted(idx), c_scalar, "right") / n)
                for pi, idx in terms))
        return float(sum(
            pi * np.mean(np.any(self.draws[:, list(idx)] > thr[list(idx)][None, :], axis=1))
            for pi, idx in terms))

    def _mc_error(self, terms, thr):
        # three standard errors, matching the QMC convention
        n = self.draws.shape[0]
        hits = np.zeros(n)
        for pi, idx in terms:
            hits += pi * np.any(self.draws[:, list(idx)] > thr[list(idx)][None, :], axis=1)
        return float(3.0 * hits.std(ddof=1) / math.sqrt(n))

    def _thresholds(self, c):
        c_arr = np.asarray(c, dtype=float)
        if c_arr.ndim == 0:
            return float(c_arr), self.problem.weights * float(c_arr)
        if c_arr.shape != (self.problem.m,):
            raise ValidationError(f"need a scalar or {self.problem.m} thresholds")
        return None, c_arr

    def rate(self, c, kind="pwer", with_error=False) -> mvdist.ProbEstimate:
        terms = self.pwer_terms if kind == "pwer" else [(1.0, self.fwer_idx)]
        method = self._method(kind)
        c_scalar, thr = self._thresholds(c)
        if method == "mc":
            value = self._mc_rate(terms, c_scalar, thr)
            err = self._mc_error(terms, thr) if with_error else 0.0
            return mvdist.ProbEstimate(value, err, "mc")
        total, err = 0.0, 0.0
        for pi, idx in terms:
            p, e = self._union(idx, thr)
            total += pi * p
            err += pi * e
        return mvdist.ProbEstimate(min(max(total, 0.0), 1.0), err, method)


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")


def pwer_estimate(problem: PwerProblem, c, **engine_kw) -> mvdist.ProbEstimate:
    """Population-wise error rate at common value ``c`` (or per-hypothesis thresholds)."""
    return _Engine(problem, **engine_kw).rate(c, "pwer", with_error=True)


def pwer_at(problem: PwerProblem, c, **engine_kw) -> float:
    """Population-wise error rate when H_i is rejected for ``Z_i > w_i c``.

    ``c`` may also be a vector of per-hypothesis thresholds, used as given.
    Keyword arguments select the backend (``backend``, ``tol``, ``seed``,
    ``n_draws``).
    """
    return _Engine(problem, **engine_kw).rate(c, "pwer").value


def fwer_at(problem: PwerProblem, c, **engine_kw) -> float:
    """Family-wise error rate: probability of rejecting any true null."""
    return _Engine(problem, **engine_kw).rate(c, "fwer").value


def solve_critical(problem: PwerProblem, alpha: float, *, error_rate: str = "pwer",
                   xtol: float = 1e-10, **engine_kw) -> CriticalValueResult:
    """Smallest ``c`` whose error rate at thresholds ``w * c`` is at most ``alpha``.

    The root is bracketed on [0, 15] and refined with Brent's method.

    Raises:
        ValidationError: if alpha is outside (0, 1).
        SolverError: if the error rate does not change sign on the bracket.
    """
    _check_alpha(alpha)
    if error_rate not in ("pwer", "fwer"):
        raise ValidationError("error_rate must be 'pwer' or 'fwer'")
    engine = _Engine(problem, **engine_kw)
    return _solve(engine, alpha, error_rate, xtol)


def _solve(engine: _Engine, alpha, error_rate, xtol=1e-10) -> CriticalValueResult:
    lo, hi = BRACKET

    def f(c):
        return engine.rate(c, error_rate).value - alpha

    f_lo, f_hi = f(lo), f(hi)
    if f_lo < 0 or f_hi > 0:
        raise SolverError(
            f"no sign change of {error_rate} - alpha on [{lo}, {hi}] "
            f"(values {f_lo + alpha:.3g}, {f_hi + alpha:.3g})")
    if f_lo == 0:
        c_star, iterations = lo, 0
    else:
        c_star, info = optimize.brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps,
                                       maxiter=500, full_output=True)
        iterations = info.iterations
    achieved = engine.rate(c_star, error_rate, with_error=True)
    return CriticalValueResult(
        c_star=float(c_star),
        achieved_level=achieved.value,
        iterations=int(iterations),
        bracket=(lo, hi),
        thresholds=tuple(float(t) for t in engine.problem.weights * c_star),
        abs_error=achieved.abs_error,
        backend=achieved.method,
        error_rate=error_rate,
    )


def closed_form_independent_pair(alpha: float, pi12: float) -> float:
    """Critical value for two independent normal tests with overlap ``pi12``.

    Solves ``(1 - pi12)(1 - y) + pi12 (1 - y^2) = alpha`` for ``y = Phi(c)``
    taking the root inside (0, 1). Requires ``0 < pi12 <= 1``; as ``pi12``
    tends to zero the value tends to the unadjusted ``Phi^-1(1 - alpha)``.
    """
    _check_alpha(alpha)
    if not 0.0 < pi12 <= 1.0:
        raise ValidationError("pi12 must lie in (0, 1]")
    a = 1.0 - pi12
    disc = a * a + 4.0 * pi12 * (1.0 - alpha)
    # numerically stable form of (-a + sqrt(disc)) / (2 pi12)
    y = 2.0 * (1.0 - alpha) / (a + math.sqrt(disc))
    return float(special.ndtri(y))


def adjusted_p(problem: PwerProblem, z_obs, *, error_rate: str = "pwer",
               **engine_kw) -> np.ndarray:
    """Adjusted p-values: the error rate at thresholds ``w * z_j / w_j``.

    ``p_j <= alpha`` exactly when ``z_j >= w_j c*(alpha)``.
    """
    z = np.asarray(z_obs, dtype=float)
    if z.shape != (problem.m,):
        raise ValidationError(f"need {problem.m} observed statistics")
    if not np.all(np.isfinite(z)):
        raise ValidationError("observed statistics must be finite")
    engine = _Engine(problem, **engine_kw)
    w = problem.weights
    return np.array([engine.rate(z[j] / w[j], error_rate).value for j in range(problem.m)])


@dataclass(frozen=True, eq=False)
class SciResult:
    lower: np.ndarray
    upper: np.ndarray
    c_star: float
    side: str

    def to_dict(self) -> dict:
        def enc(v):
            return [None if math.isinf(x) else float(x) for x in v]
        return {"lower": enc(self.lower), "upper": enc(self.upper),
                "c_star": self.c_star, "side": self.side}


SIDES = ("lower", "upper", "two-sided")


def sci_bounds(estimates, ses, c_star, side: str = "lower", weights=None) -> SciResult:
    """Simultaneous confidence bounds dual to the single-step test.

    Lower bounds are ``est - w c* se``, upper ``est + w c* se``; the two-sided
    interval intersects both, so its non-coverage is twice the one-sided one.
    """
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    if est.shape != se.shape or est.ndim != 1:
        raise ValidationError("estimates and ses must be vectors of equal length")
    if np.any(~np.isfinite(se)) or np.any(se <= 0):
        raise ValidationError("standard errors must be positive")
    if side not in SIDES:
        raise ValidationError(f"side must be one of {SIDES}")
    w = np.ones_like(est) if weights is None else np.asarray(weights, dtype=float)
    half = w * float(c_star) * se
    lower = est - half if side in ("lower", "two-sided") else np.full_like(est, -math.inf)
    upper = est + half if side in ("upper", "two-sided") else np.full_like(est, math.inf)
    return SciResult(lower, upper, float(c_star), side)


@dataclass(frozen=True)
class CoverageResult:
    coverage: float
    se: float
    n_reps: int
    duality_violations: int
    c_star: float


def coverage_sim(problem: PwerProblem, n_reps: int, seed: int, *, c_star: float | None = None,
                 alpha: float = 0.025, side: str = "lower", theta=None, ses=None,
                 threads: int = 1) -> CoverageResult:
    """Average simultaneous coverage ``sum_J pi_J P(all bounds in J cover)`` by simulation.

    Estimates are drawn as ``theta + se * Z`` with Z from the problem's null
    distribution. Each replication also checks that a lower bound exceeds
    the truth exactly when the dual test rejects.
    """
    if n_reps < 1:
        raise ValidationError("n_reps must be positive")
    if c_star is None:
        c_star = solve_critical(problem, alpha).c_star
    m = problem.m
    theta = np.zeros(m) if theta is None else np.asarray(theta, dtype=float)
    ses = np.ones(m) if ses is None else np.asarray(ses, dtype=float)
    Z = mvdist.sample_joint(problem.corr.matrix, problem.corr.df, n_reps, seed, threads=threads)
    est = theta + ses * Z
    res = sci_bounds(np.zeros(m), ses, c_star, side, problem.weights)
    half_lo = -res.lower
    half_up = res.upper
    lower = est - half_lo
    upper = est + half_up
    covered = (lower <= theta) & (upper >= theta)
    stat = (est - theta) / ses
    thr = problem.weights * c_star
    if side == "upper":
        rejects = stat < -thr
        miss = upper < theta
    else:
        rejects = stat > thr
        miss = lower > theta
    violations = int(np.count_nonzero(rejects != miss))
    per_rep = np.zeros(n_reps)
    for mask, pi in problem.structure.strata:
        idx = list(mask_indices(mask))
        per_rep += pi * np.all(covered[:, idx], axis=1)
    return CoverageResult(float(per_rep.mean()), float(per_rep.std(ddof=1) / math.sqrt(n_reps))
                          if n_reps > 1 else 0.0, n_reps, violations, float(c_star))

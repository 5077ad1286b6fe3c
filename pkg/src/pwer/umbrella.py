"""Umbrella trial with subset-wise strategy hypotheses.

``l`` disjoint strata each compare their own experimental treatment with a
common control, 1:1 within the stratum. For every non-empty subset ``S`` of
strata, ``T^S`` is the t statistic of the prevalence-weighted mean
difference over the strata in ``S``; the residual variance is pooled over
all ``2l`` cells. Subsets are indexed by bitmask, so column ``mask - 1`` of
a statistics array holds ``T^S``.

The largest ``T^S`` is selected when it exceeds the critical value, which is
chosen to control either the FWER or the PWER of the ``2^l - 1`` tests
under the global null.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats

from . import core, mvdist
from .exceptions import SolverError, ValidationError
from .popmodel import make_structure, mask_indices

MAX_STRATA = 8
DEFAULT_DRAWS = 1_000_000
CONTROLS = ("pwer", "fwer")
_SIM_STREAM = 1
_ENSEMBLE_STREAM = 0


@dataclass(frozen=True)
class UmbrellaConfig:
    """Design and scenario of one umbrella trial.

    ``pi`` defaults to equal prevalences. Stratum sizes are ``N pi_i``
    rounded to the nearest even number so both arms have equal size.
    """

    l: int
    N: int = 1056
    pi: tuple[float, ...] | None = None
    q: float = 0.0
    tau: float = 0.0
    theta_overall: float = 0.0
    sigma: float = 1.0
    alpha: float = 0.025

    def __post_init__(self):
        l = self.l
        if not isinstance(l, (int, np.integer)) or not 1 <= l <= MAX_STRATA:
            raise ValidationError(f"l must be an integer in 1..{MAX_STRATA}")
        pi = (1.0 / l,) * l if self.pi is None else tuple(float(p) for p in self.pi)
        if len(pi) != l or any(not p > 0 for p in pi):
            raise ValidationError("pi must hold l positive prevalences")
        if abs(sum(pi) - 1.0) > 1e-9:
            raise ValidationError("prevalences must sum to 1")
        object.__setattr__(self, "pi", pi)
        _zero_count(l, self.q)
        if not 0.0 <= self.tau < 1.0:
            raise ValidationError("tau must lie in [0, 1)")
        if self.tau > 0 and l - _zero_count(l, self.q) <= 1:
            raise ValidationError("tau must be 0 when at most one effect is positive")
        if not self.theta_overall >= 0 or not math.isfinite(self.theta_overall):
            raise ValidationError("theta_overall must be a non-negative number")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must lie in (0, 1)")
        n = self.stratum_sizes
        if np.any(n < 2):
            raise ValidationError("every stratum needs at least two patients")
        if self.df < 1:
            raise ValidationError("N too small for the number of strata")

    @property
    def stratum_sizes(self) -> np.ndarray:
        return np.array([2 * max(1, round(self.N * p / 2)) for p in self.pi])

    @property
    def df(self) -> int:
        return int(self.stratum_sizes.sum() - 2 * self.l)

    @property
    def n_subsets(self) -> int:
        return (1 << self.l) - 1

    def theta(self) -> np.ndarray:
        return theta_grid(self.l, self.q, self.tau, self.theta_overall, self.pi)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pi"] = list(self.pi)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "UmbrellaConfig":
        known = {"l", "N", "pi", "q", "tau", "theta_overall", "sigma", "alpha"}
        extra = set(data) - known
        if extra:
            raise ValidationError(f"unknown config keys {sorted(extra)}")
        if "l" not in data:
            raise ValidationError("config needs 'l'")
        kw = dict(data)
        try:
            if kw.get("pi") is not None:
                kw["pi"] = tuple(kw["pi"])
            return cls(**kw)
        except TypeError as exc:
            raise ValidationError(f"bad umbrella config: {exc}") from None


def _zero_count(l: int, q: float) -> int:
    l0 = q * l
    if not 0.0 <= q <= 1.0 or abs(l0 - round(l0)) > 1e-9:
        raise ValidationError(f"q*l must be an integer in 0..{l}, got {l0}")
    return int(round(l0))


def theta_grid(l: int, q: float, tau: float, theta_overall: float,
               pi: Sequence[float] | None = None) -> np.ndarray:
    """Stratum effects: ``q l`` zeros first, then equidistant positive effects.

    The positive effects span ``[m (1 - tau), m (1 + tau)]`` where ``m`` is
    chosen so their prevalence-weighted mean is ``theta_overall``; with equal
    prevalences ``m = theta_overall``.
    """
    l0 = _zero_count(l, q)
    lp = l - l0
    if not 0.0 <= tau < 1.0:
        raise ValidationError("tau must lie in [0, 1)")
    if tau > 0 and lp <= 1:
        raise ValidationError("tau must be 0 when at most one effect is positive")
    theta = np.zeros(l)
    if lp == 0:
        return theta
    w = np.full(l, 1.0 / l) if pi is None else np.asarray(pi, dtype=float)
    t = np.linspace(-1.0, 1.0, lp) if lp > 1 else np.zeros(1)
    wp = w[l0:]
    t_bar = float(np.dot(wp, t) / wp.sum())
    m = theta_overall / (1.0 + tau * t_bar)
    theta[l0:] = m * (1.0 + tau * t)
    return theta


def _subset_list(l: int) -> list[tuple[int, ...]]:
    return [mask_indices(mask) for mask in range(1, 1 << l)]


def subset_effect(theta, pi, S) -> float:
    """Prevalence-weighted mean effect over the strata in ``S`` (1-based indices)."""
    idx = _zero_based(S, len(theta))
    th = np.asarray(theta, dtype=float)[idx]
    p = np.asarray(pi, dtype=float)[idx]
    return float(np.dot(p, th) / p.sum())


def _zero_based(S, l) -> list[int]:
    idx = sorted({int(i) - 1 for i in S})
    if not idx:
        raise ValidationError("subset must be non-empty")
    if idx[0] < 0 or idx[-1] >= l:
        raise ValidationError(f"subset indices must lie in 1..{l}")
    return idx


def subset_corr(pi, S, S2) -> float:
    """Null correlation of ``T^S`` and ``T^S'``: ``pi^{S & S'} / sqrt(pi^S pi^S')``."""
    p = np.asarray(pi, dtype=float)
    a, b = _zero_based(S, len(p)), _zero_based(S2, len(p))
    inter = sorted(set(a) & set(b))
    return float(p[inter].sum() / math.sqrt(p[a].sum() * p[b].sum()))


def loadings(sizes, pi) -> np.ndarray:
    """Matrix ``A`` (l x (2^l - 1)) with ``T^S = (Z @ A)[S] / chi`` under the null.

    ``Z`` are the standardized per-stratum mean differences. The loadings use
    the realized stratum sizes, so they reduce to ``sqrt(pi_i / pi^S)`` when
    sizes are proportional to prevalences.
    """
    n = np.asarray(sizes, dtype=float)
    p = np.asarray(pi, dtype=float)
    l = len(p)
    A = np.zeros((l, (1 << l) - 1))
    for j, idx in enumerate(_subset_list(l)):
        idx = list(idx)
        w = p[idx] / p[idx].sum()
        sd = np.sqrt(4.0 / n[idx])
        A[idx, j] = w * sd / math.sqrt(np.sum((w * sd) ** 2))
    return A


def subset_corr_matrix(pi, sizes=None) -> np.ndarray:
    """Null correlation matrix of all ``T^S`` ordered by bitmask."""
    p = np.asarray(pi, dtype=float)
    n = p if sizes is None else sizes
    A = loadings(n, p)
    R = A.T @ A
    np.fill_diagonal(R, 1.0)
    return R


def umbrella_problem(config: UmbrellaConfig) -> core.PwerProblem:
    """Equivalent general problem: hypothesis ``mask`` affects every stratum in it.

    Stratum ``i`` carries prevalence ``pi_i`` and is hit by every ``H^S``
    with ``i in S``.
    """
    l = config.l
    strata = [([mask for mask in range(1, 1 << l) if mask >> i & 1], config.pi[i])
              for i in range(l)]
    structure = make_structure(strata, m=config.n_subsets)
    R = subset_corr_matrix(config.pi, config.stratum_sizes)
    return core.PwerProblem(structure, core.CorrelationModel(R, config.df))


# ---------------------------------------------------------------------------
# Null ensemble and critical values


def _stratum_columns(l: int) -> list[np.ndarray]:
    return [np.array([mask - 1 for mask in range(1, 1 << l) if mask >> i & 1]) for i in range(l)]


@dataclass(eq=False)
class NullEnsemble:
    """Sorted maxima of the null statistics shared by all critical-value searches.

    ``overall`` holds ``max_S T^S`` per draw and ``per_stratum[i]`` holds
    ``max_{S containing i} T^S``, each sorted ascending.
    """

    overall: np.ndarray
    per_stratum: list[np.ndarray]
    pi: tuple[float, ...]
    n_draws: int
    seed: int

    def fwer(self, c: float) -> float:
        return 1.0 - np.searchsorted(self.overall, c, "right") / self.n_draws

    def pwer(self, c: float) -> float:
        return float(sum(p * (1.0 - np.searchsorted(m, c, "right") / self.n_draws)
                         for p, m in zip(self.pi, self.per_stratum)))

    def rate(self, c: float, control: str) -> float:
        return self.pwer(c) if control == "pwer" else self.fwer(c)

    def standard_error(self, c: float, control: str) -> float:
        # binomial bound; exact for fwer, conservative for the weighted sum
        p = self.rate(c, control)
        return math.sqrt(max(p * (1 - p), 0.0) / self.n_draws)


def null_ensemble(config: UmbrellaConfig, n_draws: int = DEFAULT_DRAWS, seed: int = 0,
                  threads: int = 1) -> NullEnsemble:
    A = loadings(config.stratum_sizes, config.pi)
    cols = _stratum_columns(config.l)
    overall, per = [], [[] for _ in range(config.l)]
    for block in mvdist.iter_joint_blocks(A.T, config.df, n_draws, _seed(seed, _ENSEMBLE_STREAM),
                                          threads=threads):
        overall.append(block.max(axis=1))
        for i, c in enumerate(cols):
            per[i].append(block[:, c].max(axis=1))
    return NullEnsemble(np.sort(np.concatenate(overall)),
                        [np.sort(np.concatenate(p)) for p in per],
                        config.pi, n_draws, seed)


def _seed(seed: int, stream: int) -> int:
    # distinct integer seeds per stream; SeedSequence hashes the pair
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


@dataclass(frozen=True)
class UmbrellaCritical:
    c_star: float
    achieved_level: float
    mc_se: float
    control: str
    n_draws: int
    method: str

    def to_dict(self) -> dict:
        return asdict(self)


def _solve_ensemble(ens: NullEnsemble, alpha: float, control: str) -> tuple[float, int]:
    """Smallest ``c`` with empirical rate at most alpha, by bisection."""
    lo, hi = core.BRACKET
    if ens.rate(lo, control) < alpha or ens.rate(hi, control) > alpha:
        raise SolverError("critical value not bracketed by [0, 15]")
    it = 0
    while hi - lo > 1e-12 and it < 200:
        mid = 0.5 * (lo + hi)
        if ens.rate(mid, control) > alpha:
            lo = mid
        else:
            hi = mid
        it += 1
    return hi, it


def critical_value(config: UmbrellaConfig, control: str = "pwer", *, n_draws: int = DEFAULT_DRAWS,
                   seed: int = 0, threads: int = 1,
                   ensemble: NullEnsemble | None = None) -> UmbrellaCritical:
    """Critical value controlling ``control`` at level ``config.alpha`` under the global null.

    With one stratum the exact t quantile is returned. Otherwise the error
    rate is estimated from one common-random-number ensemble.
    """
    if control not in CONTROLS:
        raise ValidationError(f"control must be one of {CONTROLS}")
    if config.l == 1:
        c = float(stats.t.isf(config.alpha, config.df))
        return UmbrellaCritical(c, config.alpha, 0.0, control, 0, "exact")
    ens = ensemble or null_ensemble(config, n_draws, seed, threads)
    c, _ = _solve_ensemble(ens, config.alpha, control)
    return UmbrellaCritical(c, ens.rate(c, control), ens.standard_error(c, control), control,
                            ens.n_draws, "mc")


def fwer_critical(config: UmbrellaConfig, **kw) -> float:
    """Upper alpha quantile of ``max_S T^S`` under the global null."""
    return critical_value(config, "fwer", **kw).c_star


def pwer_critical(config: UmbrellaConfig, **kw) -> float:
    """Critical value with ``sum_i pi_i P(max_{S containing i} T^S > c) = alpha``."""
    return critical_value(config, "pwer", **kw).c_star


# ---------------------------------------------------------------------------
# Selection and simulation


def _as_stat_array(t_stats) -> np.ndarray:
    if isinstance(t_stats, Mapping):
        items = {sum(1 << (int(i) - 1) for i in S): float(v) for S, v in t_stats.items()}
        size = max(items) if items else 0
        if size + 1 & size or len(items) != size:
            raise ValidationError("t_stats must cover every non-empty subset")
        return np.array([items[mask] for mask in range(1, size + 1)])
    arr = np.asarray(t_stats, dtype=float)
    n = arr.shape[-1]
    if n + 1 & n:
        raise ValidationError("t_stats must have 2^l - 1 entries")
    return arr


def select_subset(t_stats, c: float) -> frozenset[int]:
    """Subset (1-based strata) with the largest statistic if it exceeds ``c``, else empty.

    Ties go to the smallest bitmask.
    """
    arr = _as_stat_array(t_stats)
    j = int(np.argmax(arr))
    if not arr[j] > c:
        return frozenset()
    return frozenset(i + 1 for i in mask_indices(j + 1))


@dataclass(frozen=True)
class TrialOutcome:
    t_stats: np.ndarray
    selected: frozenset[int]
    rejected: tuple[frozenset[int], ...]


def analyze_trial(t_stats, c: float) -> TrialOutcome:
    arr = _as_stat_array(t_stats)
    rejected = tuple(frozenset(i + 1 for i in mask_indices(j + 1))
                     for j in np.flatnonzero(arr > c))
    return TrialOutcome(arr, select_subset(arr, c), rejected)


def simulate_statistics(config: UmbrellaConfig, n_reps: int, seed: int, block: int = 0,
                        theta=None) -> np.ndarray:
    """Draw ``n_reps`` trials and return their statistics (n_reps x (2^l - 1)).

    Arm means and the pooled residual variance are drawn from their exact
    sampling distributions, which is equivalent to simulating patients.
    """
    rng = np.random.default_rng(np.random.SeedSequence(
        _seed(seed, _SIM_STREAM), spawn_key=(block,)))
    n = config.stratum_sizes.astype(float)
    th = config.theta() if theta is None else np.asarray(theta, dtype=float)
    sd = config.sigma * np.sqrt(4.0 / n)
    d = th + sd * rng.standard_normal((n_reps, config.l))
    # estimated sigma relative to the true one
    scale = np.sqrt(rng.chisquare(config.df, n_reps) / config.df)
    A = loadings(n, config.pi)
    return (d / sd) @ A / scale[:, None]


@dataclass(frozen=True)
class SimulationReport:
    config: UmbrellaConfig
    control: str
    n_reps: int
    seed: int
    c_star: float
    power: tuple[float, float]
    correct: tuple[float, float]
    false: tuple[float, float]
    rae: tuple[float, float]
    selected_rate: float
    realized_pwer: tuple[float, float]
    realized_fwer: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "control": self.control,
            "n_reps": self.n_reps,
            "power": list(self.power),
            "correct": list(self.correct),
            "false": list(self.false),
            "rae": list(self.rae),
            "seed": self.seed,
            "c_star": self.c_star,
            "selected_rate": self.selected_rate,
            "realized_pwer": list(self.realized_pwer),
            "realized_fwer": list(self.realized_fwer),
        }


class _Accumulator:
    """Per-replication metrics for one critical value, summed over blocks."""

    def __init__(self, config: UmbrellaConfig, theta: np.ndarray, c: float):
        l = config.l
        pi = np.asarray(config.pi)
        subsets = _subset_list(l)
        self.c = c
        theta_s = np.array([np.dot(pi[list(s)], theta[list(s)]) / pi[list(s)].sum()
                            for s in subsets])
        self.pos_cols = theta_s > 0
        self.null_cols = ~self.pos_cols
        pos = theta > 0
        size = np.array([pi[list(s)].sum() for s in subsets])
        self.correct_w = np.array([pi[[i for i in s if pos[i]]].sum() for s in subsets]) / size
        self.false_w = 1.0 - self.correct_w
        overall = np.dot(pi[pos], theta[pos]) / pi[pos].sum() if pos.any() else 0.0
        gain = np.array([np.dot(pi[list(s)], theta[list(s)]) for s in subsets])
        self.rae_w = 100.0 * gain / overall if overall > 0 else np.zeros(len(subsets))
        self.stratum_null_cols = [c_[self.null_cols[c_]] for c_ in _stratum_columns(l)]
        self.pi = pi
        self.sums = np.zeros((7, 2))  # metric x (sum, sum of squares)
        self.n = 0
        self.selected = []

    def add(self, T: np.ndarray) -> np.ndarray:
        c = self.c
        j = np.argmax(T, axis=1)
        sel = T[np.arange(len(T)), j] > c
        rej = T > c
        metrics = np.empty((7, len(T)))
        metrics[0] = np.any(rej[:, self.pos_cols], axis=1)
        metrics[1] = np.where(sel, self.correct_w[j], 0.0)
        metrics[2] = np.where(sel, self.false_w[j], 0.0)
        metrics[3] = np.where(sel, self.rae_w[j], 0.0)
        metrics[4] = sel
        metrics[5] = 0.0
        for p, cols in zip(self.pi, self.stratum_null_cols):
            if len(cols):
                metrics[5] += p * np.any(rej[:, cols], axis=1)
        metrics[6] = np.any(rej[:, self.null_cols], axis=1) if self.null_cols.any() else 0.0
        self.sums[:, 0] += metrics.sum(axis=1)
        self.sums[:, 1] += (metrics ** 2).sum(axis=1)
        self.n += len(T)
        return np.where(sel, j + 1, 0)

    def estimate(self, k: int) -> tuple[float, float]:
        n = self.n
        mean = self.sums[k, 0] / n
        if n < 2:
            return float(mean), 0.0
        var = max(self.sums[k, 1] / n - mean ** 2, 0.0) * n / (n - 1)
        return float(mean), float(math.sqrt(var / n))


def _report(config, control, n_reps, seed, acc: _Accumulator) -> SimulationReport:
    return SimulationReport(config, control, n_reps, seed, acc.c,
                            acc.estimate(0), acc.estimate(1), acc.estimate(2), acc.estimate(3),
                            acc.estimate(4)[0], acc.estimate(5), acc.estimate(6))


def _run_blocks(config, n_reps, seed, threads, theta, consume):
    sizes = [min(mvdist.BLOCK_SIZE, n_reps - s) for s in range(0, n_reps, mvdist.BLOCK_SIZE)]

    def make(b):
        return simulate_statistics(config, sizes[b], seed, b, theta)

    if threads <= 1 or len(sizes) == 1:
        for b in range(len(sizes)):
            consume(make(b))
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for T in pool.map(make, range(len(sizes))):
            consume(T)


def _critical_pair(config, n_draws, seed, threads, c_pwer, c_fwer):
    if c_pwer is not None and c_fwer is not None:
        return c_pwer, c_fwer
    ens = None if config.l == 1 else null_ensemble(config, n_draws, seed, threads)
    if c_pwer is None:
        c_pwer = critical_value(config, "pwer", ensemble=ens).c_star
    if c_fwer is None:
        c_fwer = critical_value(config, "fwer", ensemble=ens).c_star
    return c_pwer, c_fwer


def simulate(config: UmbrellaConfig, control: str, n_reps: int, seed: int, *,
             n_draws: int = DEFAULT_DRAWS, threads: int = 1,
             c_star: float | None = None) -> SimulationReport:
    """Monte Carlo operating characteristics of the selection rule.

    ``correct`` and ``false`` average ``pi^{S*+}/pi^{S*}`` and
    ``pi^{S*0}/pi^{S*}`` over all replications, counting 0 when nothing is
    selected, so their sum is the selection rate.
    """
    if control not in CONTROLS:
        raise ValidationError(f"control must be one of {CONTROLS}")
    if n_reps < 1:
        raise ValidationError("n_reps must be positive")
    if c_star is None:
        c_star = critical_value(config, control, n_draws=n_draws, seed=seed,
                                threads=threads).c_star
    theta = config.theta()
    acc = _Accumulator(config, theta, c_star)
    _run_blocks(config, n_reps, seed, threads, theta, acc.add)
    return _report(config, control, n_reps, seed, acc)


@dataclass(frozen=True)
class PairReport:
    pwer: SimulationReport
    fwer: SimulationReport
    dominance_violations: int


def simulate_pair(config: UmbrellaConfig, n_reps: int, seed: int, *,
                  n_draws: int = DEFAULT_DRAWS, threads: int = 1,
                  c_pwer: float | None = None, c_fwer: float | None = None) -> PairReport:
    """Both procedures on the same simulated trials, counting dominance violations.

    A violation is a replication where FWER control selects a non-empty
    subset and PWER control selects a different one.
    """
    if n_reps < 1:
        raise ValidationError("n_reps must be positive")
    c_pwer, c_fwer = _critical_pair(config, n_draws, seed, threads, c_pwer, c_fwer)
    theta = config.theta()
    acc_p = _Accumulator(config, theta, c_pwer)
    acc_f = _Accumulator(config, theta, c_fwer)
    violations = 0

    def consume(T):
        nonlocal violations
        sp = acc_p.add(T)
        sf = acc_f.add(T)
        violations += int(np.count_nonzero((sf > 0) & (sp != sf)))

    _run_blocks(config, n_reps, seed, threads, theta, consume)
    return PairReport(_report(config, "pwer", n_reps, seed, acc_p),
                      _report(config, "fwer", n_reps, seed, acc_f), violations)


def _power(config, c, n_reps, seed, theta_overall):
    cfg = _replace(config, theta_overall=theta_overall)
    acc = _Accumulator(cfg, cfg.theta(), c)
    _run_blocks(cfg, n_reps, seed, 1, cfg.theta(), acc.add)
    return acc.estimate(0)[0]


def _replace(config: UmbrellaConfig, **changes) -> UmbrellaConfig:
    d = config.to_dict()
    d.update(changes)
    return UmbrellaConfig.from_dict(d)


def calibrate_theta_overall(config: UmbrellaConfig, target_power: float, control: str = "fwer",
                            *, n_reps: int = 100_000, seed: int = 0,
                            n_draws: int = DEFAULT_DRAWS, c_star: float | None = None,
                            upper: float = 10.0, xtol: float = 1e-6) -> float:
    """``theta_overall`` at which the procedure reaches ``target_power``.

    The same simulated noise is reused for every candidate effect, so the
    estimated power is monotone in ``theta_overall``.
    """
    if config.q >= 1.0:
        raise ValidationError("power calibration needs at least one positive effect")
    if not 0.0 < target_power < 1.0:
        raise ValidationError("target_power must lie in (0, 1)")
    if c_star is None:
        c_star = critical_value(config, control, n_draws=n_draws, seed=seed).c_star

    def f(t):
        return _power(config, c_star, n_reps, seed, t) - target_power

    if f(0.0) > 0 or f(upper) < 0:
        raise SolverError("target power not bracketed")
    return float(optimize.bisect(f, 0.0, upper, xtol=xtol))

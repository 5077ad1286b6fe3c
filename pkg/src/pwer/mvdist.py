"""Normal and t probabilities in one, two and many dimensions.

Only upper-orthant-type probabilities ``P(X_1 <= b_1, ..., X_d <= b_d)`` are
supported; every variable is standardized and ``R`` is a correlation matrix.

Dimensions one and two (normal case) are computed deterministically. Higher
dimensions use a randomized lattice rule on the separation-of-variables
transform of the integral, which is seeded and therefore reproducible.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy import special, stats

from .exceptions import SolverError, ValidationError

logger = logging.getLogger(__name__)

INF = math.inf

#: draws generated per independently seeded block in :func:`iter_joint_blocks`
BLOCK_SIZE = 1 << 16

_SQRT2PI = math.sqrt(2.0 * math.pi)

# 20-point Gauss-Legendre rule, positive half.
_GL_X = np.array([
    0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
    0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
    0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
    0.07652652113349733,
])
_GL_W = np.array([
    0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
    0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
    0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
    0.1527533871307259,
])
_NODES = np.concatenate([1.0 - _GL_X, 1.0 + _GL_X])
_WEIGHTS = np.concatenate([_GL_W, _GL_W])


@dataclass(frozen=True)
class ProbEstimate:
    """A probability together with an estimate of its absolute error.

    For the lattice rule ``abs_error`` is three standard errors across the
    random shifts (roughly a 99% bound); deterministic routines report 0.
    """

    value: float
    abs_error: float
    method: str

    def __float__(self) -> float:
        return self.value


def _is_infinite_df(df) -> bool:
    return df is None or (isinstance(df, float) and math.isinf(df))


def _check_df(df):
    if _is_infinite_df(df):
        return INF
    if df <= 0:
        raise ValidationError(f"degrees of freedom must be positive, got {df}")
    return float(df)


def norm_cdf(x):
    """Standard normal distribution function, elementwise.

    Raises:
        ValidationError: if any input is NaN or infinite.
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("norm_cdf requires finite input")
    out = special.ndtr(arr)
    return float(out) if out.ndim == 0 else out


def norm_quantile(p):
    """Inverse of :func:`norm_cdf` on the open unit interval."""
    arr = np.asarray(p, dtype=float)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise ValidationError("norm_quantile requires 0 < p < 1")
    out = special.ndtri(arr)
    return float(out) if out.ndim == 0 else out


def _bvnu(h, k, r):
    """Upper orthant ``P(X > h, Y > k)`` for finite h, k and |r| <= 1.

    Drezner-Wesolowsky integration with Genz's refinements near |r| = 1.
    Arrays must already be broadcast to a common 1-d shape.
    """
    out = np.empty_like(h)
    tp = 2.0 * math.pi
    hk = h * k

    small = np.abs(r) < 0.925
    if np.any(small):
        hh = h[small]
        kk = k[small]
        hs = (hh * hh + kk * kk) / 2.0
        asr = np.arcsin(r[small]) / 2.0
        sn = np.sin(asr[:, None] * _NODES[None, :])
        integrand = np.exp((sn * hk[small][:, None] - hs[:, None]) / (1.0 - sn * sn))
        out[small] = (integrand @ _WEIGHTS) * asr / tp + special.ndtr(-hh) * special.ndtr(-kk)

    big = ~small
    if np.any(big):
        hb = h[big]
        rb = r[big]
        kb = np.where(rb < 0, -k[big], k[big])
        hkb = hb * kb
        bvn = np.zeros_like(hb)
        inner = np.abs(rb) < 1.0
        if np.any(inner):
            hi = hb[inner]
            ki = kb[inner]
            hki = hkb[inner]
            as_ = 1.0 - rb[inner] ** 2
            a = np.sqrt(as_)
            bs = (hi - ki) ** 2
            c = (4.0 - hki) / 8.0
            d = (12.0 - hki) / 80.0
            asr = -(bs / as_ + hki) / 2.0
            val = np.where(
                asr > -100.0,
                a * np.exp(np.maximum(asr, -100.0))
                * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0 + c * d * as_ * as_),
                0.0,
            )
            b = np.sqrt(bs)
            sp = _SQRT2PI * special.ndtr(-b / a)
            corr = np.exp(-np.minimum(hki, 200.0) / 2.0) * sp * b * (
                1.0 - c * bs * (1.0 - d * bs) / 3.0
            )
            val = np.where(hki > -100.0, val - corr, val)
            a2 = a / 2.0
            xs = (a2[:, None] * _NODES[None, :]) ** 2
            asr2 = -(bs[:, None] / xs + hki[:, None]) / 2.0
            keep = asr2 > -100.0
            spx = 1.0 + c[:, None] * xs * (1.0 + 5.0 * d[:, None] * xs)
            rs = np.sqrt(1.0 - xs)
            ep = np.exp(-(hki[:, None] / 2.0) * xs / (1.0 + rs) ** 2) / rs
            terms = np.where(keep, np.exp(np.maximum(asr2, -100.0)) * (spx - ep), 0.0)
            val = (a2 * (terms @ _WEIGHTS) - val) / tp
            bvn[inner] = val
        pos = rb > 0
        res = np.empty_like(hb)
        res[pos] = bvn[pos] + special.ndtr(-np.maximum(hb[pos], kb[pos]))
        neg = ~pos
        if np.any(neg):
            hn = hb[neg]
            kn = kb[neg]
            bn = bvn[neg]
            span = np.where(
                hn < 0,
                special.ndtr(kn) - special.ndtr(hn),
                special.ndtr(-hn) - special.ndtr(-kn),
            )
            res[neg] = np.where(hn >= kn, -bn, span - bn)
        out[big] = res

    return np.clip(out, 0.0, 1.0)


def bvn_upper(h, k, rho):
    """``P(X > h, Y > k)`` for a standard bivariate normal with correlation rho.

    Accepts arrays; infinite bounds are treated as limits.
    """
    h, k, rho = np.broadcast_arrays(
        np.asarray(h, dtype=float), np.asarray(k, dtype=float), np.asarray(rho, dtype=float)
    )
    shape = h.shape
    h = np.atleast_1d(h).ravel()
    k = np.atleast_1d(k).ravel()
    rho = np.atleast_1d(rho).ravel()
    if np.any(np.isnan(h)) or np.any(np.isnan(k)) or np.any(np.isnan(rho)):
        raise ValidationError("bvn bounds and correlation must not be NaN")
    if np.any(np.abs(rho) > 1.0 + 1e-12):
        raise ValidationError("correlation must lie in [-1, 1]")
    rho = np.clip(rho, -1.0, 1.0)

    out = np.empty_like(h)
    fin = np.isfinite(h) & np.isfinite(k)
    if np.any(fin):
        out[fin] = _bvnu(h[fin], k[fin], rho[fin])
    nf = ~fin
    if np.any(nf):
        hn, kn = h[nf], k[nf]
        val = np.where(
            (hn == INF) | (kn == INF),
            0.0,
            np.where(
                hn == -INF,
                np.where(kn == -INF, 1.0, special.ndtr(-kn)),
                special.ndtr(-hn),
            ),
        )
        out[nf] = val
    return float(out[0]) if shape == () else out.reshape(shape)


def bvn_cdf(a, b, rho):
    """``P(X <= a, Y <= b)`` for a standard bivariate normal with correlation rho.

    >>> round(bvn_cdf(0.0, 0.0, 0.5), 12)
    0.333333333333
    """
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    return bvn_upper(-a_arr, -b_arr, rho)


def check_correlation(R, dim: int | None = None) -> np.ndarray:
    """Validate a correlation matrix and return it as a float array.

    The matrix must be square, symmetric (to 1e-10), have a unit diagonal and
    entries in [-1, 1]. Positive semi-definiteness is checked when the matrix
    is factorized.
    """
    R = np.array(R, dtype=float, copy=True)
    if R.ndim == 0 and dim in (None, 1):
        R = R.reshape(1, 1)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValidationError(f"correlation matrix must be square, got shape {R.shape}")
    if dim is not None and R.shape[0] != dim:
        raise ValidationError(f"correlation matrix has dimension {R.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(R)):
        raise ValidationError("correlation matrix has non-finite entries")
    if not np.allclose(R, R.T, atol=1e-10, rtol=0):
        raise ValidationError("correlation matrix is not symmetric")
    if not np.allclose(np.diag(R), 1.0, atol=1e-10, rtol=0):
        raise ValidationError("correlation matrix must have a unit diagonal")
    if np.any(np.abs(R) > 1.0 + 1e-10):
        raise ValidationError("correlations must lie in [-1, 1]")
    R = (R + R.T) / 2.0
    np.fill_diagonal(R, 1.0)
    return np.clip(R, -1.0, 1.0)


def repair_correlation(R: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """Clip eigenvalues below ``floor`` and rescale back to a unit diagonal."""
    vals, vecs = np.linalg.eigh(R)
    vals = np.maximum(vals, floor)
    fixed = (vecs * vals) @ vecs.T
    scale = 1.0 / np.sqrt(np.diag(fixed))
    fixed = fixed * scale[:, None] * scale[None, :]
    fixed = (fixed + fixed.T) / 2.0
    np.fill_diagonal(fixed, 1.0)
    return fixed


def factorize(R, *, repair_threshold: float = 1e-6) -> np.ndarray:
    """Lower Cholesky factor of a correlation matrix.

    Borderline matrices (smallest eigenvalue above ``-repair_threshold``) are
    repaired with :func:`repair_correlation` and a warning is logged; clearly
    indefinite matrices raise :class:`SolverError`.
    """
    R = check_correlation(R)
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        pass
    min_eig = float(np.linalg.eigvalsh(R)[0])
    if min_eig < -repair_threshold:
        raise SolverError(
            f"correlation matrix is not positive semi-definite (min eigenvalue {min_eig:.3g})"
        )
    # rounding-level negatives are routine for nested statistics; only real repairs warn
    level = logging.WARNING if min_eig < -1e-10 else logging.DEBUG
    logger.log(level, "correlation matrix is singular or borderline (min eigenvalue %.3g); "
               "clipping eigenvalues", min_eig)
    return np.linalg.cholesky(repair_correlation(R))


# ---------------------------------------------------------------------------
# Lattice rule for d >= 2


def _first_primes(n: int) -> np.ndarray:
    primes: list[int] = []
    cand = 2
    while len(primes) < n:
        if all(cand % p for p in primes if p * p <= cand):
            primes.append(cand)
        cand += 1
    return np.array(primes, dtype=float)


def _ordered_cholesky(R: np.ndarray, b: np.ndarray):
    """Cholesky factor with variables ordered by smallest conditional probability.

    Returns the factor, the permuted limits and the permutation.
    """
    d = len(b)
    R = R.copy()
    b = b.copy()
    perm = np.arange(d)
    L = np.zeros((d, d))
    y = np.zeros(d)
    for i in range(d):
        best_j, best_p, best_z = i, 2.0, 0.0
        for j in range(i, d):
            var = R[j, j] - L[j, :i] @ L[j, :i]
            s = math.sqrt(max(var, 1e-20))
            z = (b[j] - L[j, :i] @ y[:i]) / s
            p = special.ndtr(z)
            if p < best_p:
                best_j, best_p, best_z = j, p, z
        if best_j != i:
            R[[i, best_j], :] = R[[best_j, i], :]
            R[:, [i, best_j]] = R[:, [best_j, i]]
            L[[i, best_j], :] = L[[best_j, i], :]
            b[[i, best_j]] = b[[best_j, i]]
            perm[[i, best_j]] = perm[[best_j, i]]
        var = R[i, i] - L[i, :i] @ L[i, :i]
        if var < -1e-8:
            raise np.linalg.LinAlgError("matrix is not positive semi-definite")
        L[i, i] = math.sqrt(max(var, 0.0))
        if L[i, i] < 1e-12:
            raise np.linalg.LinAlgError("matrix is singular")
        for j in range(i + 1, d):
            L[j, i] = (R[j, i] - L[j, :i] @ L[i, :i]) / L[i, i]
        pz = max(best_p, 1e-300)
        y[i] = -math.exp(-0.5 * best_z * best_z) / _SQRT2PI / pz if np.isfinite(best_z) else 0.0
    return L, b, perm


def _sov_values(x: np.ndarray, b: np.ndarray, L: np.ndarray, df: float) -> np.ndarray:
    """Integrand of the separation-of-variables transform at points ``x``."""
    d = len(b)
    n = x.shape[0]
    if math.isinf(df):
        scale = np.ones(n)
        u = x
    else:
        chi2 = 2.0 * special.gammaincinv(df / 2.0, np.clip(x[:, 0], 1e-16, 1 - 1e-16))
        scale = np.sqrt(chi2 / df)
        u = x[:, 1:]
    y = np.zeros((n, d))
    e = special.ndtr(b[0] * scale / L[0, 0])
    f = e.copy()
    for i in range(1, d):
        w = np.clip(u[:, i - 1] * e, 1e-300, 1.0 - 1e-16)
        y[:, i - 1] = special.ndtri(w)
        t = (b[i] * scale - y[:, :i] @ L[i, :i]) / L[i, i]
        e = special.ndtr(t)
        f *= e
    return f


def _lattice_cdf(b, R, df, tol, seed, n_shifts=16, n_start=1 << 9, max_points=1 << 22):
    try:
        L, bp, _ = _ordered_cholesky(R, b)
    except np.linalg.LinAlgError:
        min_eig = float(np.linalg.eigvalsh(R)[0])
        R = repair_correlation(R)
        level = logging.WARNING if min_eig < -1e-10 else logging.DEBUG
        logger.log(level, "correlation matrix repaired before integration")
        L, bp, _ = _ordered_cholesky(R, b)
    d = len(bp)
    ndim = d - 1 + (0 if math.isinf(df) else 1)
    if ndim == 0:
        return float(special.ndtr(bp[0])), 0.0
    gen = np.sqrt(_first_primes(ndim)) % 1.0
    rng = np.random.default_rng(seed)
    shifts = rng.random((n_shifts, ndim))
    n = n_start
    while True:
        k = np.arange(1, n + 1, dtype=float)[:, None]
        base = (k * gen[None, :]) % 1.0
        means = np.empty(n_shifts)
        for s in range(n_shifts):
            x = np.abs(2.0 * ((base + shifts[s]) % 1.0) - 1.0)
            means[s] = 0.5 * (_sov_values(x, bp, L, df).mean()
                              + _sov_values(1.0 - x, bp, L, df).mean())
        value = float(means.mean())
        err = 3.0 * float(means.std(ddof=1)) / math.sqrt(n_shifts)
        if err <= tol or n * n_shifts * 2 >= max_points:
            if err > tol:
                logger.warning("lattice rule stopped at %d points with error %.2g > tol %.2g",
                               n * n_shifts * 2, err, tol)
            return value, err
        n *= 2


def mv_cdf(upper, R, df=INF, *, tol: float = 1e-4, seed: int = 0,
           method: str = "auto") -> ProbEstimate:
    """``P(X <= upper)`` for a centered normal or t vector with correlation ``R``.

    Args:
        upper: upper limits; ``+inf`` entries are marginalized out and any
            ``-inf`` entry gives probability zero.
        R: correlation matrix matching ``upper``.
        df: degrees of freedom; ``inf`` (or ``None``) selects the normal case.
        tol: target absolute error for the lattice rule.
        seed: seed for the random lattice shifts.
        method: ``"auto"`` uses exact formulas where available, ``"qmc"``
            forces the lattice rule for d >= 2.

    Returns:
        ProbEstimate with value, error estimate and the method used.
    """
    b = np.atleast_1d(np.asarray(upper, dtype=float))
    if b.ndim != 1:
        raise ValidationError("upper must be a vector")
    R = check_correlation(R, dim=len(b))
    df = _check_df(df)
    if method not in ("auto", "qmc"):
        raise ValidationError(f"unknown method {method!r}")
    if np.any(np.isnan(b)):
        raise ValidationError("upper limits must not be NaN")
    if np.any(b == -INF):
        return ProbEstimate(0.0, 0.0, "exact")
    keep = np.isfinite(b)
    b = b[keep]
    R = R[np.ix_(keep, keep)]
    d = len(b)
    if d == 0:
        return ProbEstimate(1.0, 0.0, "exact")
    if d == 1:
        val = special.ndtr(b[0]) if math.isinf(df) else stats.t.cdf(b[0], df)
        return ProbEstimate(float(val), 0.0, "exact")
    if math.isinf(df) and np.array_equal(R, np.eye(d)):
        return ProbEstimate(float(np.prod(special.ndtr(b))), 0.0, "exact")
    if d == 2 and math.isinf(df) and method == "auto":
        return ProbEstimate(float(bvn_cdf(b[0], b[1], R[0, 1])), 0.0, "exact")
    factorize(R)  # raises on clearly indefinite input
    value, err = _lattice_cdf(b, R, df, tol, seed)
    value = min(max(value, 0.0), 1.0)
    return ProbEstimate(value, err, "qmc")


# ---------------------------------------------------------------------------
# Sampling


def _block_draws(F: np.ndarray, df: float, n: int, seed: int, block: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))
    z = rng.standard_normal((n, F.shape[1]))
    x = z @ F.T
    if not math.isinf(df):
        x /= np.sqrt(rng.chisquare(df, n) / df)[:, None]
    return x


def iter_joint_blocks(F, df, n_draws: int, seed: int, *, threads: int = 1,
                      block_size: int = BLOCK_SIZE) -> Iterator[np.ndarray]:
    """Yield draws ``Z @ F.T`` (divided by a chi scale if df is finite) in blocks.

    Each block of ``block_size`` rows is generated from its own child seed,
    so the concatenated output is identical for any number of threads.
    ``F`` may be rectangular (d x k), which lets callers sample low-rank
    correlation structures from k independent normals.
    """
    if n_draws < 1:
        raise ValidationError("n_draws must be at least 1")
    F = np.asarray(F, dtype=float)
    df = _check_df(df)
    sizes = [min(block_size, n_draws - start) for start in range(0, n_draws, block_size)]

    def make(i):
        return _block_draws(F, df, sizes[i], seed, i)

    if threads <= 1 or len(sizes) == 1:
        for i in range(len(sizes)):
            yield make(i)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # bounded look-ahead so memory stays proportional to the worker count
        pending = []
        for i in range(len(sizes)):
            pending.append(pool.submit(make, i))
            if len(pending) > threads:
                yield pending.pop(0).result()
        for fut in pending:
            yield fut.result()


def sample_joint(R, df, n_draws: int, seed: int, *, threads: int = 1) -> np.ndarray:
    """Draw ``n_draws`` rows from the centered normal (df=inf) or t with correlation R."""
    if n_draws < 1:
        raise ValidationError("n_draws must be at least 1")
    L = factorize(R)
    return np.concatenate(list(iter_joint_blocks(L, df, n_draws, seed, threads=threads)))

"""Empirical CDFs, Kolmogorov-Smirnov distances, Gaussian-mixture CDFs,
QQ tables and log-log rate fits."""

import numpy as np
from scipy import stats as _sps
from scipy.special import ndtr

# Asymptotic Kolmogorov critical values: sqrt(n) * D exceeds these with
# probability about 0.01 and 0.05.
KS_CRIT_01 = 1.63
KS_CRIT_05 = 1.36


def normal_cdf(x):
    return ndtr(x)


class Ecdf:
    """Right-continuous empirical CDF."""

    def __init__(self, samples):
        s = np.sort(np.asarray(samples, dtype=float).ravel())
        if s.size == 0:
            raise ValueError("Ecdf needs at least one sample")
        self.sorted = s

    def __call__(self, x):
        return np.searchsorted(self.sorted, x, side="right") / self.sorted.size

    def left(self, x):
        """Left limit ``F(x-)``."""
        return np.searchsorted(self.sorted, x, side="left") / self.sorted.size

    def __len__(self):
        return self.sorted.size


def ks_statistic(samples, cdf):
    """``sup_x |F_n(x) - F(x)|`` for a (possibly discontinuous) reference CDF.

    Both gaps ``F_n(x_i) - F(x_i)`` and ``F(x_i) - F_n(x_i-)`` are taken at
    every distinct sample point. This is the exact supremum for a continuous
    ``cdf`` (ties in the samples included); at an atom of ``cdf`` it can
    overstate the distance.
    """
    e = Ecdf(samples)
    pts = np.unique(e.sorted)
    F = np.asarray(cdf(pts), dtype=float)
    return float(max(np.max(np.abs(e(pts) - F)), np.max(np.abs(F - e.left(pts)))))


def ks_two_sample(a, b):
    return float(_sps.ks_2samp(a, b).statistic)


def gaussian_mixture_cdf(sigmas, weights, x):
    """``sum_r w_r Phi(x / sigma_r)``; a zero ``sigma`` contributes a unit step at 0."""
    sig = np.asarray(sigmas, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if sig.shape != w.shape:
        raise ValueError("sigmas and weights differ in length")
    if np.any(sig < 0) or np.any(w < 0):
        raise ValueError("sigmas and weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights must sum to 1 (got {w.sum():.15g})")
    x = np.asarray(x, dtype=float)
    xs = x[..., None]
    pos = sig > 0
    out = np.zeros(x.shape + (sig.size,))
    with np.errstate(divide="ignore", invalid="ignore"):
        out[..., pos] = ndtr(xs / sig[pos])
    out[..., ~pos] = (xs >= 0).astype(float)
    res = out @ w
    return float(res) if res.ndim == 0 else res


def qq_table(samples, cdf_inverse=None, sigma=1.0):
    """``(theoretical, empirical)`` quantile pairs at plotting positions ``(i-0.5)/n``."""
    s = np.sort(np.asarray(samples, dtype=float))
    p = (np.arange(1, s.size + 1) - 0.5) / s.size
    theo = cdf_inverse(p) if cdf_inverse is not None else sigma * _sps.norm.ppf(p)
    return np.column_stack([theo, s])


def mixture_quantiles(sigmas, weights, p, tol=1e-10):
    """Invert the mixture CDF by bisection (vectorized over ``p``)."""
    p = np.asarray(p, dtype=float)
    hi_s = max(float(np.max(sigmas)), 1e-12)
    lo = np.full(p.shape, -40.0 * hi_s)
    hi = np.full(p.shape, 40.0 * hi_s)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = gaussian_mixture_cdf(sigmas, weights, mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) < tol * hi_s:
            break
    return 0.5 * (lo + hi)


def moment_with_se(values, power=1):
    """Mean of ``values**power`` with its standard error."""
    v = np.asarray(values, dtype=float) ** power
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")


def variance_with_se(values):
    v = np.asarray(values, dtype=float)
    var = v.var(ddof=1)
    m4 = np.mean((v - v.mean()) ** 4)
    return float(var), float(np.sqrt(max(m4 - var**2, 0.0) / v.size))


def loglog_slope(pairs):
    """Least-squares fit of ``log value`` on ``log n``: ``(slope, intercept, r2)``."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 2:
        raise ValueError("need at least two (n, value) pairs")
    if np.any(arr <= 0):
        raise ValueError("n and value must be positive")
    lx, ly = np.log(arr[:, 0]), np.log(arr[:, 1])
    if np.ptp(ly) == 0:
        return 0.0, float(ly[0]), 1.0
    fit = _sps.linregress(lx, ly)
    return float(fit.slope), float(fit.intercept), float(fit.rvalue**2)

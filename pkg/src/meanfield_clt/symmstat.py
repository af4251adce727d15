"""Multiple Wiener integrals of product kernels, symmetric statistics and
the convergence of degenerate statistics to them."""

from dataclasses import dataclass
from itertools import combinations
from math import factorial
from typing import Callable, Optional

import numpy as np

from . import kernels
from .noise import StreamKey, normals, uniforms
from .stats import ks_two_sample

MAX_EXACT_ORDER = 3


class NonDegenerateKernel(ValueError):
    pass


def mwi_coefficient(k, j):
    """``k! / ((k - 2j)! 2^j j!)``: number of ways to pair ``2j`` of ``k`` slots."""
    return factorial(k) // (factorial(k - 2 * j) * 2**j * factorial(j))


def mwi_product(k, i1, h_norm_sq):
    """``I_k(h x ... x h)`` as a polynomial in ``I_1(h)`` (vectorized over ``i1``)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if h_norm_sq < 0:
        raise ValueError("h_norm_sq must be non-negative")
    x = np.asarray(i1, dtype=float)
    out = np.zeros_like(x)
    for j in range(k // 2 + 1):
        out = out + (-1) ** j * mwi_coefficient(k, j) * h_norm_sq**j * x ** (k - 2 * j)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ProductKernel:
    """A one-variable function ``h``; its ``k``-fold tensor power is the kernel."""

    h: Callable
    h_norm_sq: float
    degenerate: bool = True

    def power(self, k):
        return SymmetricKernel(k, lambda *xs: np.prod([self.h(x) for x in xs], axis=0), self)


@dataclass(frozen=True)
class SymmetricKernel:
    k: int
    fn: Callable  # fn(x_1, ..., x_k) vectorized over a leading axis
    product_of: Optional[ProductKernel] = None


def symmetric_statistic(kernel, samples, check_symmetry=False):
    """``sum_{i1 < ... < ik} phi(X_i1, ..., X_ik)``; 0 when ``n < k``.

    Product kernels use elementary symmetric polynomials (any ``n``); general
    kernels are enumerated exactly for ``k <= 3``.
    """
    k = kernel.k
    if k > MAX_EXACT_ORDER:
        raise ValueError(f"order k={k} exceeds the exact-enumeration cap {MAX_EXACT_ORDER}")
    if k < 0:
        raise ValueError("k must be >= 0")
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    if n < k:
        return 0.0
    if k == 0:
        return 1.0
    if kernel.product_of is not None:
        hv = np.asarray(kernel.product_of.h(x), dtype=float).reshape(1, n)
        return float(kernels.esym(hv, k)[0, k])
    idx = np.array(list(combinations(range(n), k)), dtype=np.int64)
    cols = [x[idx[:, c]] for c in range(k)]
    vals = np.asarray(kernel.fn(*cols), dtype=float)
    if check_symmetry and k > 1:
        rev = np.asarray(kernel.fn(*cols[::-1]), dtype=float)
        if not np.allclose(vals, rev, rtol=1e-10, atol=1e-12):
            raise ValueError("kernel is not symmetric")
    return float(vals.sum())


def normalized_statistics(h, samples, k):
    """``n^{-k/2} sigma_k^n(h x ... x h)`` for each row of ``samples`` (reps, n)."""
    hv = np.asarray(h(samples), dtype=float)
    n = hv.shape[1]
    return kernels.esym(hv, k)[:, k] / n ** (k / 2)


def limit_samples(k, h_norm_sq, size, key):
    """Draws of ``I_k / k!`` with ``I_1 ~ N(0, h_norm_sq)``."""
    z = normals(key, size + size % 2)[0][:size]
    return mwi_product(k, np.sqrt(h_norm_sq) * z, h_norm_sq) / factorial(k)


def _check_degenerate(hv, k):
    flat = hv.ravel()
    mean = flat.mean()
    se = flat.std(ddof=1) / np.sqrt(flat.size) if flat.size > 1 else 0.0
    if abs(mean) > 5.0 * se and abs(mean) > 1e-14:
        raise NonDegenerateKernel(f"kernel of order {k} has empirical mean {mean:.4g} (> 5 SE = {5 * se:.3g})")


def dm_convergence_experiment(kernel, measure, orders, n_grid, reps, seed=0, target_size=400_000, chunk=500):
    """KS distance between ``n^{-k/2} sigma_k^n`` and the simulated ``I_k / k!`` law.

    ``kernel`` is a :class:`ProductKernel`; ``measure`` a 1-d
    :class:`~meanfield_clt.model.SampleableMeasure` for the samples.
    Returns rows ``{"k", "n", "reps", "ks_distance"}``.
    """
    rows = []
    q = measure.n_uniforms
    for n in n_grid:
        key = StreamKey(int(seed), ("dm", int(n)))
        stats = {k: [] for k in orders}
        for s in range(0, reps, chunk):
            lanes = np.arange(s, min(reps, s + chunk))
            width = n * q
            u = uniforms(key, width + width % 2, lanes)[:, :width].reshape(lanes.size, n, q)
            x = measure.sample(u)[..., 0]
            hv = np.asarray(kernel.h(x), dtype=float)
            if s == 0:
                _check_degenerate(hv, max(orders))
            e = kernels.esym(hv, max(orders))
            for k in orders:
                stats[k].append(e[:, k] / n ** (k / 2))
        for k in orders:
            vals = np.concatenate(stats[k])
            target = limit_samples(k, kernel.h_norm_sq, target_size, StreamKey(int(seed), ("dm-target", k)))
            rows.append({"k": int(k), "n": int(n), "reps": int(reps), "ks_distance": ks_two_sample(vals, target)})
    return rows


def isometry_check(k, h_norm_sq, size=1_000_000, seed=0):
    """Monte Carlo ``E[I_k^2]`` with its standard error, and the exact ``k! v^k``."""
    z = normals(StreamKey(int(seed), ("isometry", k)), size + size % 2)[0][:size]
    ik = mwi_product(k, np.sqrt(h_norm_sq) * z, h_norm_sq)
    sq = np.asarray(ik) ** 2
    return float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(size)), float(factorial(k) * h_norm_sq**k)

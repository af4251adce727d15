"""Path functionals, conditional-mean estimation and the scaled fluctuation
statistic ``sqrt(N) * (mean_j phi(Z^j) - m_hat)``."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from .simulate import iter_iid_chunks, simulate_common_and_law, simulate_interacting


# ------------------------------------------------------------------ functionals


@dataclass(frozen=True)
class TestFunctional:
    """Real-valued functional of a discretized path.

    ``fn(states[n, L+1, d], grid[L+1]) -> [n]``.
    """

    __test__ = False  # keep pytest from collecting this class

    id: str
    fn: Callable
    params: tuple = ()

    def __call__(self, states, grid):
        return np.asarray(self.fn(states, grid), dtype=float)


def _time_avg(v, grid):
    return np.trapezoid(v, grid, axis=1) / (grid[-1] - grid[0])


_ZETA = {
    "min_abs_one": lambda v: np.minimum(np.abs(v), 1.0),
    "tanh_abs": lambda v: np.tanh(np.abs(v)),
}


def make_functional(name, **params):
    coord = int(params.get("coord", 0))
    if name == "terminal":
        return TestFunctional(f"terminal[{coord}]", lambda s, g: s[:, -1, coord], (("coord", coord),))
    if name == "time_average":
        return TestFunctional(f"time_average[{coord}]", lambda s, g: _time_avg(s[:, :, coord], g), (("coord", coord),))
    if name == "smooth_threshold":
        level, width = float(params.get("level", 0.0)), float(params.get("width", 0.25))
        if width <= 0:
            raise ValueError("width must be positive")
        return TestFunctional(
            f"smooth_threshold[{coord}]",
            lambda s, g: 1.0 / (1.0 + np.exp(-(s[:, -1, coord] - level) / width)),
            (("coord", coord), ("level", level), ("width", width)),
        )
    if name in ("zeta_terminal", "zeta_time_average"):
        zname = params.get("zeta", "min_abs_one")
        zeta = _ZETA[zname]
        coord = int(params.get("coord", 1))
        if name == "zeta_terminal":
            fn = lambda s, g: zeta(s[:, -1, coord])  # noqa: E731
        else:
            fn = lambda s, g: _time_avg(zeta(s[:, :, coord]), g)  # noqa: E731
        return TestFunctional(f"{name}[{coord}]", fn, (("coord", coord), ("zeta", zname)))
    if name == "constant":
        c = float(params.get("value", 0.0))
        return TestFunctional(f"constant[{c}]", lambda s, g: np.full(s.shape[0], c), (("value", c),))
    raise ValueError(f"unknown functional {name!r}")


FUNCTIONALS = ("terminal", "time_average", "smooth_threshold", "zeta_terminal", "zeta_time_average", "constant")


def mean_and_se(values):
    """Sample mean and its standard error; exact for constant input."""
    v = np.asarray(values, dtype=float)
    c0 = v[0]
    dev = v - c0
    mean = c0 + dev.mean()
    se = dev.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else float("nan")
    return float(mean), float(se)


# ------------------------------------------------------------------ conditional mean


def estimate_m_phi(spec, cfg, phi, common, mc_size=None, tag="mphi", chunk=20000):
    """Monte Carlo estimate of the conditional mean of ``phi`` given ``common``.

    Returns ``(mean, se)`` from ``mc_size`` fresh conditionally independent paths.
    """
    mc_size = cfg.m2 if mc_size is None else int(mc_size)
    if mc_size < 2:
        raise ValueError("mc_size must be >= 2")
    vals = np.concatenate([phi(b.states, b.grid) for b in iter_iid_chunks(spec, cfg, common, mc_size, tag, chunk)])
    return mean_and_se(vals)


# ------------------------------------------------------------------ ensembles


@dataclass
class FluctuationSample:
    value: float
    n_particles: int
    phi_id: str
    common_path_id: int
    replication_id: int
    m_hat: float
    m_hat_se: float

    def as_row(self):
        return asdict(self)


def _check_m2(cfg):
    if cfg.m2 < 100 * cfg.n_particles:
        raise ValueError(
            f"mc_size={cfg.m2} < 100*N={100 * cfg.n_particles}: centering noise would inflate the variance by more than 1%"
        )


def _nsystem_value(spec, cfg, phi, rep, common_rep, noise, m_hat):
    ns = simulate_interacting(spec, cfg, rep, common_rep=common_rep, common_noise=noise)
    vals = phi(ns.particles.states, ns.particles.grid)
    return float(np.sqrt(cfg.n_particles) * (vals.mean() - m_hat))


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def fluctuation_ensemble(spec, cfg, phi, mode, common_rep=0, reps=None, threads=1, common=None, m_hat=None):
    """Fluctuation samples, either pooled over common paths or given one.

    pooled: sample ``r`` uses common path ``r`` (fresh common noise, fresh
    ensemble for the conditional law, fresh ``m_hat``) and an N-system driven
    by that same common noise. conditional: every sample reuses common path
    ``common_rep`` and varies only the particle noise.
    """
    _check_m2(cfg)
    reps = cfg.replication_count if reps is None else int(reps)
    N = cfg.n_particles
    if mode == "pooled":

        def one(r):
            cmn = simulate_common_and_law(spec, cfg, r)
            mh, se = estimate_m_phi(spec, cfg, phi, cmn, tag=f"mphi-{phi.id}")
            v = _nsystem_value(spec, cfg, phi, r, r, cmn.noise, mh)
            return FluctuationSample(v, N, phi.id, r, r, mh, se)

        return _map(one, range(reps), threads)
    if mode == "conditional":
        cmn = common if common is not None else simulate_common_and_law(spec, cfg, common_rep)
        if m_hat is None:
            m_hat = estimate_m_phi(spec, cfg, phi, cmn, tag=f"mphi-{phi.id}")
        mh, se = m_hat
        cr = cmn.common_rep

        def one(r):
            return FluctuationSample(_nsystem_value(spec, cfg, phi, r, cr, cmn.noise, mh), N, phi.id, cr, r, mh, se)

        return _map(one, range(reps), threads)
    raise ValueError(f"mode must be 'pooled' or 'conditional', got {mode!r}")


def values(samples):
    return np.array([s.value for s in samples])


def variance_decomposition(pooled, groups):
    """Compare the pooled variance with the spread of conditional means.

    ``pooled`` are pooled-mode values; ``groups`` is a list of conditional
    samples, one array per common path. The variance of conditional means is
    bias-corrected by the within-group variance over the group size. Returns
    a dict with the margin ``pooled_var - var_cond_mean`` and its standard error.
    """
    pooled = np.asarray(pooled, dtype=float)
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least two common paths")
    n = pooled.size
    pv = pooled.var(ddof=1)
    pv_se = np.sqrt(max(np.mean((pooled - pooled.mean()) ** 4) - pv**2, 0.0) / n)
    means = np.array([g.mean() for g in groups])
    within = np.array([g.var(ddof=1) for g in groups])
    sizes = np.array([g.size for g in groups])
    raw = means.var(ddof=1)
    vcm = raw - np.mean(within / sizes)
    G = len(groups)
    vcm_se = raw * np.sqrt(2.0 / (G - 1))
    ev = within.mean()
    margin = pv - vcm
    se = float(np.hypot(pv_se, vcm_se))
    return {
        "pooled_var": float(pv), "pooled_var_se": float(pv_se),
        "var_cond_mean": float(vcm), "var_cond_mean_se": float(vcm_se),
        "mean_cond_var": float(ev), "groups": G, "group_sizes": sizes.tolist(),
        "margin": float(margin), "margin_se": se,
        "holds": bool(margin >= -3.0 * se),
        "total_from_parts": float(ev + vcm),
    }

"""Change-of-measure exponent linking the conditionally independent system to
the interacting one.

For particles ``X^i`` stepped against the frozen ``(Y, mu_hat)`` and the
interacting coefficients evaluated at ``(Y^N, mu^N)`` with ``mu^N`` the cloud
of the same particles::

    J1 = sum_i sum_l  beta_il . dB_il - 1/2 |beta_il|^2 dt,
         beta = sigma^+ (b(X, Y^N, mu^N) - b(X, Y, mu_hat))
    J2 = sum over accepted jumps of log(d^N / d^i)
         - sum_l dt * int (d^N - d^i)(h) gamma(dh)

On the Euler grid this is the exact likelihood ratio of the two schemes, so
``E[exp(J1 + J2)] = 1`` holds up to Monte Carlo error only.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .noise import StreamKey, uniforms
from .simulate import GridMismatch, SimulationError, simulate_common_and_law, simulate_iid_given_common, simulate_yN


class MissingNoise(ValueError):
    pass


def gamma_nodes(spec, key, step, q):
    """Quadrature nodes/weights for ``int f dgamma`` at one grid step.

    Atomic jump measures are integrated exactly; otherwise ``q`` fresh draws
    keyed by ``(key, step)`` are averaged and scaled by the total mass.
    """
    g = spec.gamma
    if g.total_mass == 0:
        return np.zeros((0, spec.dim_x)), np.zeros(0)
    if g.is_atomic:
        pts, w = g.atoms
        keep = w > 0
        return pts[keep], w[keep]
    q2 = q + (q % 2)
    u = uniforms(key, q2 * g.n_uniforms, [step])[0].reshape(q2, g.n_uniforms)[:q]
    return g.quadrature(u)


def compute_logH(spec, cfg, common, iid_paths, yN, empN=None, quad_samples=8, quad_key=None):
    """Return ``(J1, J2)`` along one set of conditionally independent paths.

    ``empN`` defaults to the clouds of ``iid_paths``; pass
    ``common.law_views()`` together with ``yN = common.y_path`` to force the
    two coefficient sets to agree (both exponents are then exactly zero).
    """
    if not iid_paths.retained:
        raise MissingNoise("iid paths must be simulated with retained noise")
    L, dt = cfg.steps, cfg.dt
    if iid_paths.states.shape[1] != L + 1 or yN.shape[0] != L + 1:
        raise GridMismatch("paths and Y^N must live on the configuration grid")
    views_N = iid_paths.views() if empN is None else list(empN)
    quad_key = quad_key if quad_key is not None else StreamKey(cfg.seed, ("girsanov-quad", common.common_rep))
    pinv_t = spec.sigma_pinv.T
    ev = iid_paths.events
    acc = ev.accepted
    acc_step, acc_pid, acc_mark, acc_rate = ev.step[acc], ev.pid[acc], ev.mark[acc], ev.rate[acc]
    order = np.argsort(acc_step, kind="stable")
    acc_step, acc_pid, acc_mark, acc_rate = acc_step[order], acc_pid[order], acc_mark[order], acc_rate[order]
    offs = np.searchsorted(acc_step, np.arange(L + 1))
    n = iid_paths.states.shape[0]

    j1 = 0.0
    jump_log = 0.0
    comp = 0.0
    for s in range(L):
        x = iid_paths.states[:, s]
        nuN, nuh = views_N[s], common.law_view(s)
        yn, y = yN[s], common.y_path[s]
        beta = (np.asarray(spec.drift_b(x, yn, nuN)) - np.asarray(spec.drift_b(x, y, nuh))) @ pinv_t
        j1 += float(np.sum(beta * iid_paths.brownian[:, s])) - 0.5 * dt * float(np.sum(beta * beta))
        nodes, w = gamma_nodes(spec, quad_key, s, quad_samples)
        for h, wq in zip(nodes, w):
            hh = np.broadcast_to(h, (n, spec.dim_x))
            diff = np.asarray(spec.jump_rate_d(x, yn, nuN, hh)) - np.asarray(spec.jump_rate_d(x, y, nuh, hh))
            comp += dt * wq * float(diff.sum())
        lo, hi = offs[s], offs[s + 1]
        if hi > lo:
            pid = acc_pid[lo:hi]
            dN = np.asarray(spec.jump_rate_d(x[pid], yn, nuN, acc_mark[lo:hi]))
            jump_log += float(np.sum(np.log(dN) - np.log(acc_rate[lo:hi])))
    j2 = jump_log - comp
    if not (np.isfinite(j1) and np.isfinite(j2)):
        raise SimulationError("non-finite Girsanov exponent")
    return j1, j2


@dataclass
class MartingaleRow:
    rep: int
    common_rep: int
    J1: float
    J2: float

    @property
    def H(self):
        return float(np.exp(self.J1 + self.J2))


@dataclass
class MartingaleReport:
    rows: list
    n_particles: int
    ensemble_size: int

    @property
    def H(self):
        return np.array([r.H for r in self.rows])

    @property
    def mean_H(self):
        return float(self.H.mean())

    @property
    def se_H(self):
        h = self.H
        return float(h.std(ddof=1) / np.sqrt(h.size)) if h.size > 1 else float("nan")

    def summary(self):
        return {
            "reps": len(self.rows), "N": self.n_particles, "M": self.ensemble_size,
            "mean_H": self.mean_H, "se_H": self.se_H,
            "z_score": (self.mean_H - 1.0) / self.se_H if self.se_H and self.se_H > 0 else 0.0,
            "min_H": float(self.H.min()), "max_H": float(self.H.max()),
        }


def martingale_rep(spec, cfg, rep, common_rep=None, quad_samples=8, common=None):
    common_rep = rep if common_rep is None else common_rep
    if common is None:
        common = simulate_common_and_law(spec, cfg, common_rep)
    paths = simulate_iid_given_common(spec, cfg, common, cfg.n_particles, tag=f"girsanov-{rep}")
    yN = simulate_yN(spec, cfg, paths, common)
    j1, j2 = compute_logH(spec, cfg, common, paths, yN, quad_samples=quad_samples,
                          quad_key=StreamKey(cfg.seed, ("girsanov-quad", rep)))
    return MartingaleRow(rep, common_rep, j1, j2)


def martingale_experiment(spec, cfg, reps=None, n_common=None, quad_samples=8, threads=1):
    """``reps`` independent values of ``H^N(T)``.

    With ``n_common`` set, replications cycle over that many common paths
    (the identity holds conditionally on the common noise); by default every
    replication draws its own common path.
    """
    reps = cfg.replication_count if reps is None else reps
    cache = {}

    def one(r):
        cr = r if n_common is None else r % n_common
        common = None
        if n_common is not None:
            common = cache.get(cr)
            if common is None:
                common = cache.setdefault(cr, simulate_common_and_law(spec, cfg, cr))
        return martingale_rep(spec, cfg, r, cr, quad_samples, common)

    if n_common is not None:
        # build shared common paths up front so threads never race on them
        for cr in range(min(n_common, reps)):
            cache[cr] = simulate_common_and_law(spec, cfg, cr)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one, range(reps)))
    else:
        rows = [one(r) for r in range(reps)]
    return MartingaleReport(rows, cfg.n_particles, cfg.ensemble_size)

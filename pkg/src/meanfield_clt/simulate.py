"""Euler time-stepping for the particle system, the common factor and the
conditional-law ensemble.

Within a step the measure argument and the jump-acceptance state are frozen at
the left grid node. Jump candidates carry exact times; every candidate in
``(t_l, t_{l+1}]`` is tested against the state at ``t_l`` and accepted ones add
their mark. Drift and diffusion are applied once per step.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm

from .model import MeasureView
from .noise import StreamKey, brownian_increments, brownian_step, sample_prm_candidates, uniforms


class SimulationError(RuntimeError):
    """Non-finite state or coefficient value; carries the step and context."""


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_particles: int = 100
    ensemble_size: int = 1000
    dt: float = 0.01
    horizon: float = 1.0
    seed: int = 0
    replication_count: int = 1
    mc_size: Optional[int] = None  # M2 for the conditional-mean estimate; default 100 * N

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.n_particles < 1 or self.ensemble_size < 1:
            raise ValueError("n_particles and ensemble_size must be >= 1")
        if self.replication_count < 1:
            raise ValueError("replication_count must be >= 1")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("horizon must be an integer multiple of dt")

    @property
    def steps(self):
        return int(round(self.horizon / self.dt))

    @property
    def grid(self):
        return np.arange(self.steps + 1) * self.dt

    @property
    def m2(self):
        return self.mc_size if self.mc_size is not None else 100 * self.n_particles


# ------------------------------------------------------------------ stream layout


def common_key(seed, common_rep):
    return StreamKey(int(seed), ("common", int(common_rep)))


def nsystem_key(seed, rep, common_rep):
    return StreamKey(int(seed), ("nsys", int(common_rep), int(rep)))


def ensemble_key(seed, common_rep):
    return StreamKey(int(seed), ("ensemble", int(common_rep)))


def iid_key(seed, common_rep, tag):
    return StreamKey(int(seed), ("iid", int(common_rep), str(tag)))


# ------------------------------------------------------------------ results


@dataclass
class EventTable:
    """All tested jump candidates of a batch (accepted and rejected)."""

    pid: np.ndarray  # row index within the batch
    step: np.ndarray
    t: np.ndarray
    mark: np.ndarray
    u: np.ndarray
    rate: np.ndarray  # d evaluated at the acceptance test
    accepted: np.ndarray

    def select(self, mask):
        return EventTable(*(getattr(self, f)[mask] for f in ("pid", "step", "t", "mark", "u", "rate", "accepted")))

    def __len__(self):
        return self.t.shape[0]


@dataclass
class ParticlePath:
    grid: np.ndarray
    states: np.ndarray  # (L+1, d)
    brownian: Optional[np.ndarray]  # (L, d)
    jump_events: Optional[EventTable]
    lane: int


@dataclass
class ParticleBatch:
    """Paths of ``n`` particles on a common grid, stored as dense arrays."""

    grid: np.ndarray
    states: np.ndarray  # (n, L+1, d)
    lanes: np.ndarray
    brownian: Optional[np.ndarray] = None  # (n, L, d)
    events: Optional[EventTable] = None

    def __len__(self):
        return self.states.shape[0]

    @property
    def retained(self):
        return self.brownian is not None and self.events is not None

    def path(self, i):
        ev = self.events.select(self.events.pid == i) if self.events is not None else None
        bm = self.brownian[i] if self.brownian is not None else None
        return ParticlePath(self.grid, self.states[i], bm, ev, int(self.lanes[i]))

    def cloud(self, node):
        return self.states[:, node, :]

    def views(self):
        return [MeasureView(self.states[:, node, :]) for node in range(self.grid.shape[0])]


@dataclass
class CommonNoise:
    y0: np.ndarray
    brownian0: np.ndarray  # (L, m)
    jump_step: np.ndarray  # accepted common jumps
    jump_time: np.ndarray
    jump_mark: np.ndarray  # (e, m)

    def jump_sum_per_step(self, steps, m):
        out = np.zeros((steps, m))
        for j in range(m):
            out[:, j] = np.bincount(self.jump_step, weights=self.jump_mark[:, j], minlength=steps)
        return out


@dataclass
class CommonFactorRealization:
    grid: np.ndarray
    noise: CommonNoise
    y_path: np.ndarray  # (L+1, m)
    cond_law: np.ndarray  # (L+1, M, d); node-major for cheap per-node views
    exp_integrator: np.ndarray  # (L+1, m, m)
    seed: int
    common_rep: int
    _views: dict = field(default_factory=dict, repr=False)

    @property
    def y0(self):
        return self.noise.y0

    @property
    def brownian0(self):
        return self.noise.brownian0

    @property
    def ensemble_size(self):
        return self.cond_law.shape[1]

    @property
    def steps(self):
        return self.grid.shape[0] - 1

    def law_view(self, node):
        v = self._views.get(node)
        if v is None:
            v = MeasureView(self.cond_law[node])
            self._views[node] = v
        return v

    def law_views(self):
        return [self.law_view(node) for node in range(self.grid.shape[0])]


@dataclass
class NSystemPath:
    particles: ParticleBatch
    common: np.ndarray  # U^N path (L+1, m)
    noise: CommonNoise

    @property
    def emp_measure(self):
        return self.particles.states.transpose(1, 0, 2)


# ------------------------------------------------------------------ noise plumbing


def draw_common_noise(spec, cfg, common_rep):
    key = common_key(cfg.seed, common_rep)
    m, L = spec.dim_y, cfg.steps
    y0 = spec.init_rho0.sample(uniforms(key.child("y0"), spec.init_rho0.n_uniforms))[0]
    bm = brownian_increments(key.child("bm"), cfg.dt, L, m)
    cands = sample_prm_candidates(key.child("prm"), spec.gamma0, spec.rate_upper, cfg.horizon)
    if len(cands):
        acc = cands.u <= np.asarray(spec.jump_rate_d0(cands.mark), dtype=float)
        t, mark = cands.t[acc], cands.mark[acc]
    else:
        t, mark = np.zeros(0), np.zeros((0, m))
    step = _step_index(cfg.grid, t)
    return CommonNoise(np.asarray(y0, dtype=float), bm, step, t, mark)


def _step_index(grid, t):
    # candidate in (t_l, t_{l+1}] belongs to step l
    return np.clip(np.searchsorted(grid, t, side="left") - 1, 0, grid.shape[0] - 2).astype(np.int64)


def _initial_states(spec, key, lanes):
    u = uniforms(key.child("x0"), spec.init_mu0.n_uniforms, lanes)
    return np.asarray(spec.init_mu0.sample(u), dtype=float).reshape(len(lanes), spec.dim_x)


class _CandidateSchedule:
    def __init__(self, spec, cfg, key, lanes):
        c = sample_prm_candidates(key.child("prm"), spec.gamma, spec.rate_upper, cfg.horizon, lanes)
        step = _step_index(cfg.grid, c.t) if len(c) else np.zeros(0, dtype=np.int64)
        order = np.argsort(step, kind="stable")
        self.owner = c.owner[order]
        self.t = c.t[order]
        self.mark = c.mark[order].reshape(-1, spec.dim_x)
        self.u = c.u[order]
        self.step = step[order]
        self.offsets = np.searchsorted(self.step, np.arange(cfg.steps + 1), side="left")

    def at(self, s):
        return slice(self.offsets[s], self.offsets[s + 1])


def _check_finite(arr, what, step):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(arr)))[:3].tolist()
        raise SimulationError(f"non-finite {what} at step {step} (first offending indices {bad})")


# ------------------------------------------------------------------ core loop


def _euler(spec, cfg, key, lanes, *, y_init=None, common_noise=None, frozen=None, retain=False, law_out=False):
    """Shared Euler loop.

    Interacting mode (``frozen is None``): the measure argument is the batch's
    own cloud and the common factor evolves with it. Frozen mode: ``frozen`` is
    ``(y_path, views)`` and particles are stepped against them independently.
    """
    lanes = np.asarray(lanes, dtype=np.uint64)
    n, d, m, L, dt = lanes.shape[0], spec.dim_x, spec.dim_y, cfg.steps, cfg.dt
    sig_t = spec.diffusion_sigma.T
    sig0_t = spec.diffusion_sigma0.T
    x = _initial_states(spec, key, lanes)
    states = np.empty((n, L + 1, d))
    states[:, 0] = x
    bm_store = np.empty((n, L, d)) if retain else None
    sched = _CandidateSchedule(spec, cfg, key, lanes)
    rates = np.empty(sched.u.shape[0]) if retain else None
    accepted = np.zeros(sched.u.shape[0], dtype=bool)
    bm_key = key.child("bm")

    interacting = frozen is None
    if interacting:
        y = np.array(y_init, dtype=float)
        y_path = np.empty((L + 1, m))
        y_path[0] = y
        jump0 = common_noise.jump_sum_per_step(L, m)
        exp_int = np.empty((L + 1, m, m)) if law_out else None
        if law_out:
            exp_int[0] = np.eye(m)
    else:
        y_fixed, views = frozen

    for s in range(L):
        if interacting:
            nu = MeasureView(x)
            yv = y
        else:
            nu = views[s]
            yv = y_fixed[s]
        drift = np.asarray(spec.drift_b(x, yv, nu), dtype=float)
        _check_finite(drift, "drift b", s)
        dW = brownian_step(bm_key, s, dt, d, lanes)
        if retain:
            bm_store[:, s] = dW
        x_new = x + drift * dt + dW @ sig_t
        sl = sched.at(s)
        if sl.stop > sl.start:
            own = sched.owner[sl]
            rate = np.asarray(spec.jump_rate_d(x[own], yv, nu, sched.mark[sl]), dtype=float)
            _check_finite(rate, "jump rate d", s)
            acc = sched.u[sl] <= rate
            accepted[sl] = acc
            if retain:
                rates[sl] = rate
            if acc.any():
                for j in range(d):
                    x_new[:, j] += np.bincount(own[acc], weights=sched.mark[sl][acc, j], minlength=n)
        if interacting:
            drift0 = np.asarray(spec.drift_b0(y, nu), dtype=float)
            _check_finite(drift0, "drift b0", s)
            if law_out:
                a = np.atleast_2d(spec.derivatives.b02(y, nu)) * dt
                step_exp = np.exp(a) if m == 1 else expm(a)
                exp_int[s + 1] = step_exp @ exp_int[s]
            y = y + drift0 * dt + common_noise.brownian0[s] @ sig0_t + jump0[s]
            y_path[s + 1] = y
        _check_finite(x_new, "particle state", s)
        x = x_new
        states[:, s + 1] = x

    events = None
    if retain:
        events = EventTable(sched.owner, sched.step, sched.t, sched.mark, sched.u, rates, accepted)
    batch = ParticleBatch(cfg.grid, states, lanes, bm_store, events)
    if interacting:
        return batch, y_path, exp_int
    return batch


# ------------------------------------------------------------------ public API


def simulate_interacting(spec, cfg, rep, common_rep=None, lanes=None, retain=False, common_noise=None):
    """The N-particle system coupled to the common factor ``U^N``.

    The common noise is taken from ``common_rep`` (default ``rep``) so the
    system can be paired with a conditional-law realization built from the
    same common noise. ``lanes`` defaults to particle ids ``0..N-1``.
    """
    common_rep = rep if common_rep is None else common_rep
    if lanes is None:
        lanes = np.arange(cfg.n_particles)
    cn = common_noise if common_noise is not None else draw_common_noise(spec, cfg, common_rep)
    batch, y_path, _ = _euler(spec, cfg, nsystem_key(cfg.seed, rep, common_rep), lanes, y_init=cn.y0, common_noise=cn, retain=retain)
    return NSystemPath(batch, y_path, cn)


def simulate_common_and_law(spec, cfg, rep):
    """Common-factor path plus an ``M``-particle estimate of the conditional law."""
    cn = draw_common_noise(spec, cfg, rep)
    batch, y_path, exp_int = _euler(
        spec, cfg, ensemble_key(cfg.seed, rep), np.arange(cfg.ensemble_size), y_init=cn.y0, common_noise=cn, law_out=True
    )
    law = np.ascontiguousarray(batch.states.transpose(1, 0, 2))
    return CommonFactorRealization(cfg.grid, cn, y_path, law, exp_int, int(cfg.seed), int(rep))


def _check_grid(cfg, common):
    if common.grid.shape != cfg.grid.shape or not np.allclose(common.grid, cfg.grid, rtol=0, atol=1e-12):
        raise GridMismatch("common realization was solved on a different grid")


def simulate_iid_given_common(spec, cfg, common, count, tag="iid", retain=True, lanes=None, chunk=None):
    """``count`` conditionally independent particles given ``common``.

    Each particle is stepped against the frozen ``(Y, mu_hat)`` of ``common``.
    ``chunk`` bounds memory; results do not depend on it.
    """
    _check_grid(cfg, common)
    if lanes is None:
        lanes = np.arange(count)
    lanes = np.asarray(lanes, dtype=np.uint64)
    key = iid_key(cfg.seed, common.common_rep, tag)
    views = common.law_views()
    if lanes.shape[0] == 0:
        return ParticleBatch(cfg.grid, np.zeros((0, cfg.steps + 1, spec.dim_x)), lanes,
                             np.zeros((0, cfg.steps, spec.dim_x)) if retain else None,
                             _empty_events(spec) if retain else None)
    if chunk is None or chunk >= lanes.shape[0]:
        return _euler(spec, cfg, key, lanes, frozen=(common.y_path, views), retain=retain)
    parts = [
        _euler(spec, cfg, key, lanes[s:s + chunk], frozen=(common.y_path, views), retain=retain)
        for s in range(0, lanes.shape[0], chunk)
    ]
    return concat_batches(parts)


def iter_iid_chunks(spec, cfg, common, count, tag, chunk):
    """Yield conditionally independent batches without retaining noise."""
    _check_grid(cfg, common)
    key = iid_key(cfg.seed, common.common_rep, tag)
    views = common.law_views()
    lanes = np.arange(count, dtype=np.uint64)
    for s in range(0, count, chunk):
        yield _euler(spec, cfg, key, lanes[s:s + chunk], frozen=(common.y_path, views))


def _empty_events(spec):
    z = np.zeros(0)
    return EventTable(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), z, np.zeros((0, spec.dim_x)), z, z,
                      np.zeros(0, dtype=bool))


def concat_batches(parts):
    offsets = np.cumsum([0] + [len(p) for p in parts[:-1]])
    states = np.concatenate([p.states for p in parts])
    lanes = np.concatenate([p.lanes for p in parts])
    bm = np.concatenate([p.brownian for p in parts]) if parts[0].brownian is not None else None
    ev = None
    if parts[0].events is not None:
        fields = ("pid", "step", "t", "mark", "u", "rate", "accepted")
        cols = {f: [] for f in fields}
        for off, p in zip(offsets, parts):
            for f in fields:
                v = getattr(p.events, f)
                cols[f].append(v + off if f == "pid" else v)
        ev = EventTable(*(np.concatenate(cols[f]) for f in fields))
        # same (step, particle, time) order as an unchunked run
        ev = ev.select(np.argsort(ev.step, kind="stable"))
    return ParticleBatch(parts[0].grid, states, lanes, bm, ev)


def solve_common_equation(spec, cfg, noise, views):
    """Euler solve of the common-factor equation against given measures."""
    m, L, dt = spec.dim_y, cfg.steps, cfg.dt
    if len(views) < L:
        raise GridMismatch("need one measure per grid step")
    sig0_t = spec.diffusion_sigma0.T
    jump0 = noise.jump_sum_per_step(L, m)
    y = np.array(noise.y0, dtype=float)
    path = np.empty((L + 1, m))
    path[0] = y
    for s in range(L):
        drift0 = np.asarray(spec.drift_b0(y, views[s]), dtype=float)
        _check_finite(drift0, "drift b0", s)
        y = y + drift0 * dt + noise.brownian0[s] @ sig0_t + jump0[s]
        path[s + 1] = y
    return path


def simulate_yN(spec, cfg, emp_measure, common):
    """``Y^N`` driven by the common noise of ``common`` and the clouds ``emp_measure``.

    ``emp_measure`` is a :class:`ParticleBatch`, an ``(L+1, n, d)`` array of
    clouds, or a list of :class:`MeasureView`.
    """
    _check_grid(cfg, common)
    if isinstance(emp_measure, ParticleBatch):
        if emp_measure.grid.shape != cfg.grid.shape:
            raise GridMismatch("particle batch on a different grid")
        views = emp_measure.views()
    elif isinstance(emp_measure, np.ndarray):
        if emp_measure.shape[0] != cfg.steps + 1:
            raise GridMismatch("cloud array must have one cloud per node")
        views = [MeasureView(c) for c in emp_measure]
    else:
        views = list(emp_measure)
    return solve_common_equation(spec, cfg, common.noise, views)


# ------------------------------------------------------------------ Y^N rate


def yN_rate_experiment(spec, cfg, n_grid, reps, threads=1):
    """Mean squared gap ``|Y^N_T - Y_T|^2`` per ``N`` with standard errors.

    Replication ``r`` uses common path ``r``; the particle noise is nested
    across ``N`` (the first ``N`` lanes of one draw), which lowers the
    variance of the fitted slope without biasing any single ``N``.
    Returns ``(rows, fit)`` with ``rows = [(N, mean, se)]`` and
    ``fit = (slope, intercept, r2)``.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .stats import loglog_slope

    n_grid = sorted(int(n) for n in n_grid)
    nmax = n_grid[-1]

    def one(r):
        common = simulate_common_and_law(spec, cfg, r)
        batch = simulate_iid_given_common(spec, cfg, common, nmax, tag="rates", retain=False)
        out = []
        for n in n_grid:
            views = [MeasureView(batch.states[:n, node]) for node in range(cfg.steps + 1)]
            yN = solve_common_equation(spec, cfg, common.noise, views)
            out.append(float(np.sum((yN[-1] - common.y_path[-1]) ** 2)))
        return out

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            errs = np.array(list(pool.map(one, range(reps))))
    else:
        errs = np.array([one(r) for r in range(reps)])
    rows = [(n, float(errs[:, i].mean()), float(errs[:, i].std(ddof=1) / np.sqrt(reps)) if reps > 1 else float("nan"))
            for i, n in enumerate(n_grid)]
    fit = loglog_slope([(n, m) for n, m, _ in rows])
    return rows, fit

"""Deterministic, schedule-independent random supply.

A :class:`StreamKey` (seed plus a tuple of labels) is hashed to a Philox key.
Within one key, randomness is addressed by ``(lane, position)``: lanes are
particle ids, positions index draws along that particle's stream. Any subset of
lanes can therefore be generated in any order, in any chunking, on any thread,
and the values do not change.
"""

from dataclasses import dataclass, field
import hashlib

import numpy as np

from . import kernels

RNG_ALGORITHM = kernels.RNG_ALGORITHM


@dataclass(frozen=True)
class StreamKey:
    seed: int
    labels: tuple = ()

    def child(self, *labels):
        return StreamKey(self.seed, self.labels + tuple(labels))

    @property
    def philox_key(self):
        return _hash_key(self.seed, self.labels)


def _hash_key(seed, labels):
    payload = repr((int(seed), tuple(labels))).encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:], "little")


def _lanes(lanes):
    if lanes is None:
        return np.zeros(1, dtype=np.uint64)
    return np.atleast_1d(np.asarray(lanes, dtype=np.uint64))


def uniforms(key, count, lanes=None, start=0):
    """Uniforms in [0, 1): shape ``(len(lanes), count)``.

    ``start`` is the index of the first uniform along each lane's stream and
    must be even (two uniforms per Philox block).
    """
    if start % 2:
        raise ValueError("start must be even")
    lanes = _lanes(lanes)
    k0, k1 = key.philox_key
    nblocks = (count + 1) // 2
    out = kernels.philox_uniform(k0, k1, lanes, start // 2, nblocks)
    return out[:, :count]


def normals(key, count, lanes=None, start=0):
    if start % 2:
        raise ValueError("start must be even")
    lanes = _lanes(lanes)
    k0, k1 = key.philox_key
    nblocks = (count + 1) // 2
    out = kernels.philox_normal(k0, k1, lanes, start // 2, nblocks)
    return out[:, :count]


def numpy_generator(key):
    """A numpy ``Generator`` for non-hot-path sampling (validation probes)."""
    k0, k1 = key.philox_key
    return np.random.Generator(np.random.Philox(key=(k1 << 32) | k0))


# ------------------------------------------------------------------ Brownian


def _bm_blocks_per_step(dim):
    return (dim + 1) // 2


def brownian_step(key, step, dt, dim, lanes=None):
    """Increments of one grid step for every lane: shape ``(len(lanes), dim)``."""
    bps = _bm_blocks_per_step(dim)
    z = normals(key, 2 * bps, lanes=lanes, start=2 * bps * step)[:, :dim]
    return np.sqrt(dt) * z


def brownian_increments(key, dt, steps, dim, lanes=None):
    """Gaussian increments with covariance ``dt * I``.

    Returns ``(steps, dim)`` for a single lane (``lanes=None`` means lane 0) or
    ``(len(lanes), steps, dim)`` when ``lanes`` is an array. Step ``l`` of lane
    ``p`` equals ``brownian_step(key, l, dt, dim, [p])`` bit-for-bit.
    """
    if dim <= 0:
        raise ValueError(f"dim must be positive, got {dim}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    single = lanes is None or np.ndim(lanes) == 0
    lanes_arr = _lanes(lanes)
    bps = _bm_blocks_per_step(dim)
    if steps == 0:
        out = np.empty((lanes_arr.shape[0], 0, dim))
    else:
        z = normals(key, 2 * bps * steps, lanes=lanes_arr)
        out = np.sqrt(dt) * z.reshape(lanes_arr.shape[0], steps, 2 * bps)[:, :, :dim]
    return out[0] if single else out


# ------------------------------------------------------------------ PRM


@dataclass
class PrmCandidates:
    """Level-marked candidate points of a PRM restricted to ``u <= rate_upper``.

    Arrays are flat over all candidates of all lanes, ordered by lane index
    (position in the ``lanes`` argument) then time.
    """

    owner: np.ndarray  # index into the lanes argument
    t: np.ndarray
    mark: np.ndarray  # (n, dim)
    u: np.ndarray
    n_lanes: int
    counts: np.ndarray = field(default=None)

    def __len__(self):
        return self.t.shape[0]

    def for_lane(self, i):
        sel = self.owner == i
        return PrmCandidates(np.zeros(sel.sum(), dtype=np.int64), self.t[sel], self.mark[sel], self.u[sel], 1)


def sample_prm_candidates(key, measure, rate_upper, horizon, lanes=None):
    """Candidate points of a PRM on ``[0, horizon] x R^dim x [0, rate_upper]``.

    Times form a Poisson process of rate ``rate_upper * measure.total_mass``;
    marks are drawn from the normalized measure and levels ``u`` uniformly on
    ``[0, rate_upper]``. A downstream consumer accepts a candidate when
    ``u <= d(state, mark)``.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    lanes_arr = _lanes(lanes)
    n = lanes_arr.shape[0]
    dim = measure.dim
    mass = float(measure.total_mass)
    empty = PrmCandidates(
        np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, dim)), np.zeros(0), n, np.zeros(n, dtype=np.int64)
    )
    if mass == 0.0:
        return empty
    if rate_upper <= 0:
        raise ValueError("rate_upper must be positive when the jump measure has mass")
    intensity = rate_upper * mass
    mean = intensity * horizon
    width = int(mean + 6.0 * np.sqrt(mean) + 8)
    width += width % 2
    gap_key, level_key, mark_key = key.child("gap"), key.child("level"), key.child("mark")

    # Inter-arrival gaps; the stream is extended until every lane has passed
    # the horizon, so the result never depends on the initial width.
    gaps = np.empty((n, 0))
    times = np.empty((n, 0))
    while True:
        more = -np.log1p(-uniforms(gap_key, width, lanes_arr, start=gaps.shape[1])) / intensity
        gaps = np.concatenate([gaps, more], axis=1)
        last = times[:, -1:] if times.shape[1] else np.zeros((n, 1))
        times = np.concatenate([times, last + np.cumsum(more, axis=1)], axis=1)
        if np.all(times[:, -1] > horizon):
            break
    counts = (times <= horizon).sum(axis=1)
    total = int(counts.sum())
    if total == 0:
        return empty
    cmax = int(counts.max())
    cw = cmax + (cmax % 2)
    levels = rate_upper * uniforms(level_key, cw, lanes_arr)[:, :cmax]
    q = measure.n_uniforms
    mark_u = uniforms(mark_key, cw * q, lanes_arr)[:, : cmax * q].reshape(n, cmax, q)
    valid = np.arange(cmax)[None, :] < counts[:, None]
    owner = np.broadcast_to(np.arange(n)[:, None], (n, cmax))[valid]
    marks = measure.transform(mark_u[valid])
    return PrmCandidates(owner.astype(np.int64), times[:, :cmax][valid], marks, levels[valid], n, counts)

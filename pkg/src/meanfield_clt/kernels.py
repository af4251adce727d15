"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The module-level names dispatch to one backend according to
``MEANFIELD_CLT_NUMBA`` (see :mod:`meanfield_clt._accel`). Both backends are
importable as :data:`numpy_impl` and :data:`numba_impl` for cross-checking and
benchmarking; they must agree bit-for-bit on the integer kernels and to
rounding on the floating-point ones.

Counter-based generator: Philox4x32-10 (Salmon et al., SC'11), counter words
``(lane_lo, lane_hi, pos_lo, pos_hi)`` and a 2x32-bit key. Each block gives two
53-bit uniforms; normals come from Box-Muller on that pair.
"""

from types import SimpleNamespace

import numpy as np

from ._accel import USE_NUMBA, NUMBA_AVAILABLE

PHILOX_M0 = 0xD2511F53
PHILOX_M1 = 0xCD9E8D57
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85
_MASK32 = 0xFFFFFFFF
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0

RNG_ALGORITHM = "philox4x32-10;key=blake2b-64;u53;box-muller"


# ---------------------------------------------------------------- numpy path


def _np_philox_blocks(key0, key1, lanes, pos0, nblocks):
    lanes = np.asarray(lanes, dtype=np.uint64)
    n = lanes.shape[0]
    m32 = np.uint64(_MASK32)
    pos = np.uint64(pos0) + np.arange(nblocks, dtype=np.uint64)
    c0 = np.broadcast_to((lanes & m32)[:, None], (n, nblocks)).copy()
    c1 = np.broadcast_to((lanes >> np.uint64(32))[:, None], (n, nblocks)).copy()
    c2 = np.broadcast_to((pos & m32)[None, :], (n, nblocks)).copy()
    c3 = np.broadcast_to((pos >> np.uint64(32))[None, :], (n, nblocks)).copy()
    k0 = int(key0) & _MASK32
    k1 = int(key1) & _MASK32
    s32 = np.uint64(32)
    m0 = np.uint64(PHILOX_M0)
    m1 = np.uint64(PHILOX_M1)
    for r in range(10):
        if r:
            k0 = (k0 + PHILOX_W0) & _MASK32
            k1 = (k1 + PHILOX_W1) & _MASK32
        p0 = c0 * m0
        p1 = c2 * m1
        c0, c1, c2, c3 = (
            (p1 >> s32) ^ c1 ^ np.uint64(k0),
            p1 & m32,
            (p0 >> s32) ^ c3 ^ np.uint64(k1),
            p0 & m32,
        )
    out = np.empty((n, nblocks, 4), dtype=np.uint32)
    out[..., 0] = c0
    out[..., 1] = c1
    out[..., 2] = c2
    out[..., 3] = c3
    return out


def _np_blocks_to_uniform(blocks):
    b = blocks.astype(np.uint64)
    u1 = ((b[..., 0] >> np.uint64(5)) * np.uint64(67108864) + (b[..., 1] >> np.uint64(6))) * _INV_2_53
    u2 = ((b[..., 2] >> np.uint64(5)) * np.uint64(67108864) + (b[..., 3] >> np.uint64(6))) * _INV_2_53
    n, nb = blocks.shape[:2]
    out = np.empty((n, 2 * nb))
    out[:, 0::2] = u1
    out[:, 1::2] = u2
    return out


def _np_philox_uniform(key0, key1, lanes, pos0, nblocks):
    return _np_blocks_to_uniform(_np_philox_blocks(key0, key1, lanes, pos0, nblocks))


def _np_philox_normal(key0, key1, lanes, pos0, nblocks):
    u = _np_philox_uniform(key0, key1, lanes, pos0, nblocks)
    rad = np.sqrt(-2.0 * np.log(1.0 - u[:, 0::2]))
    ang = _TWO_PI * u[:, 1::2]
    out = np.empty_like(u)
    out[:, 0::2] = rad * np.cos(ang)
    out[:, 1::2] = rad * np.sin(ang)
    return out


def _np_accumulate_drift(G, F, dB):
    G += np.einsum("ijc,ic->ij", F, dB)


def _np_esym(values, k):
    values = np.asarray(values, dtype=np.float64)
    r = values.shape[0]
    e = np.zeros((r, k + 1))
    e[:, 0] = 1.0
    for col in range(values.shape[1]):
        x = values[:, col]
        for j in range(k, 0, -1):
            e[:, j] += x * e[:, j - 1]
    return e


def _np_pairwise_tanh_mean(x, pts):
    out = np.empty(x.shape[0])
    step = max(1, 2_000_000 // max(pts.shape[0], 1))
    for s in range(0, x.shape[0], step):
        out[s:s + step] = np.tanh(pts[None, :] - x[s:s + step, None]).mean(axis=1)
    return out


def _np_pairwise_sigmoid_tanh_mean(x, pts, offset, coef):
    out = np.empty(x.shape[0])
    step = max(1, 2_000_000 // max(pts.shape[0], 1))
    for s in range(0, x.shape[0], step):
        z = offset[s:s + step, None] + coef * np.tanh(pts[None, :] - x[s:s + step, None])
        out[s:s + step] = (1.0 / (1.0 + np.exp(-z))).mean(axis=1)
    return out


numpy_impl = SimpleNamespace(
    philox_blocks=_np_philox_blocks,
    philox_uniform=_np_philox_uniform,
    philox_normal=_np_philox_normal,
    accumulate_drift=_np_accumulate_drift,
    esym=_np_esym,
    pairwise_tanh_mean=_np_pairwise_tanh_mean,
    pairwise_sigmoid_tanh_mean=_np_pairwise_sigmoid_tanh_mean,
)


# ---------------------------------------------------------------- numba path

numba_impl = None

if NUMBA_AVAILABLE:
    from numba import njit

    _U_W0 = np.uint64(PHILOX_W0)
    _U_W1 = np.uint64(PHILOX_W1)
    _U_MASK = np.uint64(_MASK32)

    @njit(cache=True, nogil=True)
    def _nb_philox_one(c0, c1, c2, c3, k0, k1):
        for r in range(10):
            if r:
                k0 = (k0 + _U_W0) & _U_MASK
                k1 = (k1 + _U_W1) & _U_MASK
            p0 = c0 * np.uint64(PHILOX_M0)
            p1 = c2 * np.uint64(PHILOX_M1)
            n0 = (p1 >> np.uint64(32)) ^ c1 ^ k0
            n1 = p1 & np.uint64(_MASK32)
            n2 = (p0 >> np.uint64(32)) ^ c3 ^ k1
            n3 = p0 & np.uint64(_MASK32)
            c0, c1, c2, c3 = n0, n1, n2, n3
        return c0, c1, c2, c3

    @njit(cache=True, nogil=True)
    def _nb_philox_blocks(key0, key1, lanes, pos0, nblocks):
        n = lanes.shape[0]
        out = np.empty((n, nblocks, 4), dtype=np.uint32)
        k0 = np.uint64(key0) & np.uint64(_MASK32)
        k1 = np.uint64(key1) & np.uint64(_MASK32)
        for i in range(n):
            lane = np.uint64(lanes[i])
            c0 = lane & np.uint64(_MASK32)
            c1 = lane >> np.uint64(32)
            for b in range(nblocks):
                pos = np.uint64(pos0) + np.uint64(b)
                r0, r1, r2, r3 = _nb_philox_one(c0, c1, pos & np.uint64(_MASK32), pos >> np.uint64(32), k0, k1)
                out[i, b, 0] = r0
                out[i, b, 1] = r1
                out[i, b, 2] = r2
                out[i, b, 3] = r3
        return out

    @njit(cache=True, nogil=True)
    def _nb_philox_uniform(key0, key1, lanes, pos0, nblocks):
        n = lanes.shape[0]
        out = np.empty((n, 2 * nblocks))
        k0 = np.uint64(key0) & np.uint64(_MASK32)
        k1 = np.uint64(key1) & np.uint64(_MASK32)
        for i in range(n):
            lane = np.uint64(lanes[i])
            c0 = lane & np.uint64(_MASK32)
            c1 = lane >> np.uint64(32)
            for b in range(nblocks):
                pos = np.uint64(pos0) + np.uint64(b)
                r0, r1, r2, r3 = _nb_philox_one(c0, c1, pos & np.uint64(_MASK32), pos >> np.uint64(32), k0, k1)
                out[i, 2 * b] = ((r0 >> np.uint64(5)) * np.uint64(67108864) + (r1 >> np.uint64(6))) * _INV_2_53
                out[i, 2 * b + 1] = ((r2 >> np.uint64(5)) * np.uint64(67108864) + (r3 >> np.uint64(6))) * _INV_2_53
        return out

    @njit(cache=True, nogil=True)
    def _nb_philox_normal(key0, key1, lanes, pos0, nblocks):
        u = _nb_philox_uniform(key0, key1, lanes, pos0, nblocks)
        n = u.shape[0]
        out = np.empty_like(u)
        for i in range(n):
            for b in range(nblocks):
                rad = np.sqrt(-2.0 * np.log(1.0 - u[i, 2 * b]))
                ang = _TWO_PI * u[i, 2 * b + 1]
                out[i, 2 * b] = rad * np.cos(ang)
                out[i, 2 * b + 1] = rad * np.sin(ang)
        return out

    @njit(cache=True, nogil=True)
    def _nb_accumulate_drift(G, F, dB):
        n, p, d = F.shape
        for i in range(n):
            for j in range(p):
                acc = 0.0
                for c in range(d):
                    acc += F[i, j, c] * dB[i, c]
                G[i, j] += acc

    @njit(cache=True, nogil=True)
    def _nb_esym(values, k):
        r, n = values.shape
        e = np.zeros((r, k + 1))
        for a in range(r):
            e[a, 0] = 1.0
            for col in range(n):
                x = values[a, col]
                for j in range(k, 0, -1):
                    e[a, j] += x * e[a, j - 1]
        return e

    @njit(cache=True, nogil=True)
    def _nb_pairwise_tanh_mean(x, pts):
        n = x.shape[0]
        p = pts.shape[0]
        out = np.empty(n)
        for i in range(n):
            acc = 0.0
            for j in range(p):
                acc += np.tanh(pts[j] - x[i])
            out[i] = acc / p
        return out

    @njit(cache=True, nogil=True)
    def _nb_pairwise_sigmoid_tanh_mean(x, pts, offset, coef):
        n = x.shape[0]
        p = pts.shape[0]
        out = np.empty(n)
        for i in range(n):
            acc = 0.0
            for j in range(p):
                z = offset[i] + coef * np.tanh(pts[j] - x[i])
                acc += 1.0 / (1.0 + np.exp(-z))
            out[i] = acc / p
        return out

    def _nb_esym_wrap(values, k):
        return _nb_esym(np.ascontiguousarray(values, dtype=np.float64), int(k))

    def _nb_blocks_wrap(key0, key1, lanes, pos0, nblocks):
        return _nb_philox_blocks(np.uint64(key0), np.uint64(key1), np.asarray(lanes, dtype=np.uint64), np.uint64(pos0), int(nblocks))

    def _nb_uniform_wrap(key0, key1, lanes, pos0, nblocks):
        return _nb_philox_uniform(np.uint64(key0), np.uint64(key1), np.asarray(lanes, dtype=np.uint64), np.uint64(pos0), int(nblocks))

    def _nb_normal_wrap(key0, key1, lanes, pos0, nblocks):
        return _nb_philox_normal(np.uint64(key0), np.uint64(key1), np.asarray(lanes, dtype=np.uint64), np.uint64(pos0), int(nblocks))

    def _nb_tanh_wrap(x, pts):
        return _nb_pairwise_tanh_mean(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(pts, dtype=np.float64))

    def _nb_sig_wrap(x, pts, offset, coef):
        return _nb_pairwise_sigmoid_tanh_mean(
            np.ascontiguousarray(x, dtype=np.float64),
            np.ascontiguousarray(pts, dtype=np.float64),
            np.ascontiguousarray(offset, dtype=np.float64),
            float(coef),
        )

    def _nb_drift_wrap(G, F, dB):
        _nb_accumulate_drift(G, np.ascontiguousarray(F), np.ascontiguousarray(dB))

    numba_impl = SimpleNamespace(
        philox_blocks=_nb_blocks_wrap,
        philox_uniform=_nb_uniform_wrap,
        philox_normal=_nb_normal_wrap,
        accumulate_drift=_nb_drift_wrap,
        esym=_nb_esym_wrap,
        pairwise_tanh_mean=_nb_tanh_wrap,
        pairwise_sigmoid_tanh_mean=_nb_sig_wrap,
    )


_active = numba_impl if USE_NUMBA else numpy_impl

philox_blocks = _active.philox_blocks
philox_uniform = _active.philox_uniform
philox_normal = _active.philox_normal
accumulate_drift = _active.accumulate_drift
esym = _active.esym
# numpy's SIMD tanh/exp beat scalar libm calls inside the jitted loops on the
# reference machine (see benchmarks/bench_kernels.py), so both backends
# dispatch the pairwise kernels to numpy.
pairwise_tanh_mean = numpy_impl.pairwise_tanh_mean
pairwise_sigmoid_tanh_mean = numpy_impl.pairwise_sigmoid_tanh_mean

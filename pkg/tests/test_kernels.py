import numpy as np
import pytest

from meanfield_clt import kernels

needs_numba = pytest.mark.skipif(kernels.numba_impl is None, reason="numba not importable")

# Published known-answer vectors for Philox4x32-10 (Random123 distribution).
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF, 0xFFFFFFFF), (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
]


def _block(impl, ctr, key):
    lane = np.array([ctr[0] | (ctr[1] << 32)], dtype=np.uint64)
    pos = ctr[2] | (ctr[3] << 32)
    return tuple(int(v) for v in impl.philox_blocks(key[0], key[1], lane, pos, 1)[0, 0])


@pytest.mark.parametrize("ctr,key,expected", KAT)
def test_philox_known_answers_numpy(ctr, key, expected):
    assert _block(kernels.numpy_impl, ctr, key) == expected


@needs_numba
@pytest.mark.parametrize("ctr,key,expected", KAT)
def test_philox_known_answers_numba(ctr, key, expected):
    assert _block(kernels.numba_impl, ctr, key) == expected


def test_philox_matches_randomgen():
    randomgen = pytest.importorskip("randomgen")
    key = (0x1234ABCD, 0x0F0F1111)
    for lane, pos in [(5, 1), (2**32 + 3, 2**33 + 9)]:
        # randomgen increments the counter before producing its first block
        ctr = np.array([lane - 1, pos], dtype=np.uint64)
        bg = randomgen.Philox(number=4, width=32, key=np.array([key[0] | (key[1] << 32)], dtype=np.uint64), counter=ctr)
        ref = [int(v) for v in bg.random_raw(4)]
        ours = kernels.numpy_impl.philox_blocks(key[0], key[1], np.array([lane], dtype=np.uint64), pos, 1)[0, 0]
        assert ref == [int(v) for v in ours]


@needs_numba
def test_backends_agree():
    rng = np.random.default_rng(1)
    lanes = np.array([0, 3, 2**33 + 7], dtype=np.uint64)
    np_b = kernels.numpy_impl.philox_blocks(11, 22, lanes, 5, 9)
    nb_b = kernels.numba_impl.philox_blocks(11, 22, lanes, 5, 9)
    assert np.array_equal(np_b, nb_b)
    assert np.array_equal(kernels.numpy_impl.philox_uniform(11, 22, lanes, 0, 9),
                          kernels.numba_impl.philox_uniform(11, 22, lanes, 0, 9))
    np.testing.assert_allclose(kernels.numpy_impl.philox_normal(11, 22, lanes, 0, 9),
                               kernels.numba_impl.philox_normal(11, 22, lanes, 0, 9), rtol=1e-14, atol=1e-14)
    hv = rng.normal(size=(4, 30))
    np.testing.assert_allclose(kernels.numpy_impl.esym(hv, 3), kernels.numba_impl.esym(hv, 3), rtol=1e-12, atol=1e-12)
    x, pts = rng.normal(size=50), np.sort(rng.normal(size=40))
    np.testing.assert_allclose(kernels.numpy_impl.pairwise_tanh_mean(x, pts),
                               kernels.numba_impl.pairwise_tanh_mean(x, pts), rtol=1e-12)
    np.testing.assert_allclose(kernels.numpy_impl.pairwise_sigmoid_tanh_mean(x, pts, 0.2 * x, 0.7),
                               kernels.numba_impl.pairwise_sigmoid_tanh_mean(x, pts, 0.2 * x, 0.7), rtol=1e-12)
    G1, G2 = np.zeros((6, 6)), np.zeros((6, 6))
    F, dB = rng.normal(size=(6, 6, 2)), rng.normal(size=(6, 2))
    kernels.numpy_impl.accumulate_drift(G1, F, dB)
    kernels.numba_impl.accumulate_drift(G2, F, dB)
    np.testing.assert_allclose(G1, G2, rtol=1e-13)


def test_uniforms_in_unit_interval():
    u = kernels.numpy_impl.philox_uniform(1, 2, np.arange(100, dtype=np.uint64), 0, 50)
    assert u.min() >= 0.0 and u.max() < 1.0


def test_esym_matches_brute_force():
    from itertools import combinations

    v = np.array([[1.0, 2.0, -3.0, 0.5]])
    e = kernels.numpy_impl.esym(v, 3)[0]
    for k in range(4):
        ref = sum(np.prod(c) for c in combinations(v[0], k)) if k else 1.0
        assert e[k] == pytest.approx(ref)

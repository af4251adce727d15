import math

import numpy as np
import pytest

from meanfield_clt.model import SampleableMeasure
from meanfield_clt.noise import StreamKey, normals
from meanfield_clt.symmstat import (
    NonDegenerateKernel, ProductKernel, SymmetricKernel, dm_convergence_experiment, isometry_check,
    limit_samples, mwi_coefficient, mwi_product, normalized_statistics, symmetric_statistic,
)

GAUSS = SampleableMeasure.gaussian([0.0], [1.0])
SCORE = ProductKernel(lambda x: x, 1.0)
SIGN = ProductKernel(np.sign, 1.0)


def test_mwi_low_orders():
    x, v = 1.7, 0.6
    assert mwi_product(0, x, v) == 1.0
    assert mwi_product(1, x, v) == x
    assert mwi_product(2, x, v) == pytest.approx(x**2 - v)
    assert mwi_product(3, x, v) == pytest.approx(x**3 - 3 * v * x)
    assert [mwi_coefficient(4, j) for j in range(3)] == [1, 6, 3]
    np.testing.assert_allclose(mwi_product(2, np.array([0.0, 1.0]), 1.0), [-1.0, 0.0])


def test_mwi_matches_probabilists_hermite():
    x = np.linspace(-3, 3, 13)
    for k in range(7):
        np.testing.assert_allclose(mwi_product(k, x, 1.0), np.polynomial.hermite_e.hermeval(x, [0] * k + [1]), atol=1e-9)


def test_mwi_errors():
    with pytest.raises(ValueError):
        mwi_product(2, 1.0, -0.1)
    with pytest.raises(ValueError):
        mwi_product(-1, 1.0, 1.0)


def test_symmetric_statistic_enumeration():
    s = [1.0, 2.0, -3.0]
    assert symmetric_statistic(SCORE.power(2), s) == pytest.approx(-7.0)
    assert symmetric_statistic(SCORE.power(1), s) == pytest.approx(0.0)
    assert symmetric_statistic(SCORE.power(3), s[:2]) == 0.0
    general = SymmetricKernel(2, lambda a, b: a * b)
    assert symmetric_statistic(general, s, check_symmetry=True) == pytest.approx(-7.0)
    assert symmetric_statistic(SymmetricKernel(3, lambda a, b, c: a + b + c), [1.0, 2.0, 3.0, 4.0]) == pytest.approx(30.0)
    with pytest.raises(ValueError, match="symmetric"):
        symmetric_statistic(SymmetricKernel(2, lambda a, b: a - 2 * b), s, check_symmetry=True)
    with pytest.raises(ValueError, match="cap"):
        symmetric_statistic(SymmetricKernel(4, lambda *xs: xs[0]), s)


def test_product_path_agrees_with_enumeration():
    x = np.random.default_rng(1).normal(size=12)
    for k in (1, 2, 3):
        general = SymmetricKernel(k, lambda *xs: np.prod([np.tanh(v) for v in xs], axis=0))
        fast = ProductKernel(np.tanh, 0.0).power(k)
        assert symmetric_statistic(fast, x) == pytest.approx(symmetric_statistic(general, x), rel=1e-12)
    np.testing.assert_allclose(normalized_statistics(np.tanh, x[None], 2)[0], symmetric_statistic(fast.product_of.power(2), x) / 12)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_isometry(k):
    mc, se, exact = isometry_check(k, 0.8, size=400_000, seed=k)
    assert abs(mc - exact) < 3 * se


def test_generating_identity():
    v = 1.0
    i1 = np.sqrt(v) * normals(StreamKey(3, ("gen",)), 200_000)[0]
    for t in (-1.0, 0.5, 1.0):
        series = sum(t**k / math.factorial(k) * mwi_product(k, i1, v) for k in range(7))
        diff = np.abs(series - np.exp(t * i1 - t**2 * v / 2))
        tail = sum(abs(t) ** k * v ** (k / 2) / math.sqrt(math.factorial(k)) for k in range(7, 40))
        assert diff.mean() <= tail + 3 * diff.std(ddof=1) / np.sqrt(diff.size)


def test_orthogonality():
    i1 = normals(StreamKey(0, ("orth",)), 200_000)[0]
    Is = [mwi_product(k, i1, 1.0) * np.ones_like(i1) for k in range(4)]
    for j in range(4):
        for k in range(j + 1, 4):
            prod = (Is[j] - Is[j].mean()) * (Is[k] - Is[k].mean())
            assert abs(prod.mean()) < 3 * prod.std(ddof=1) / np.sqrt(prod.size) + 1e-12


def test_limit_samples_moments():
    z = limit_samples(2, 1.0, 200_000, StreamKey(0, ("t",)))
    assert z.min() >= -0.5
    assert abs(z.mean()) < 3 * z.std() / np.sqrt(z.size)
    assert z.var() == pytest.approx(0.5, rel=0.03)


def test_dm_first_order_normal_score():
    rows = dm_convergence_experiment(SCORE, GAUSS, [1], [2000], 5000, seed=1, target_size=200_000)
    assert rows[0]["ks_distance"] < 0.05 and rows[0]["reps"] == 5000


def test_dm_second_order_sign_kernel():
    rows = dm_convergence_experiment(SIGN, GAUSS, [2], [2000], 5000, seed=2, target_size=200_000)
    assert rows[0]["ks_distance"] < 0.05


def test_dm_zero_kernel_is_point_mass():
    zero = ProductKernel(lambda x: 0.0 * x, 0.0)
    rows = dm_convergence_experiment(zero, GAUSS, [1, 2], [10], 50, target_size=1000)
    assert all(r["ks_distance"] == 0.0 for r in rows)


def test_non_degenerate_kernel_rejected():
    with pytest.raises(NonDegenerateKernel):
        dm_convergence_experiment(ProductKernel(lambda x: x + 1.0, 2.0), GAUSS, [1], [100], 200)


def test_degenerate_kernel_sample_mean():
    x = GAUSS.sample(np.random.default_rng(0).random((100_000, GAUSS.n_uniforms)))[:, 0]
    for h in (SCORE.h, SIGN.h):
        hv = h(x)
        assert abs(hv.mean()) < 3 * hv.std() / np.sqrt(hv.size)

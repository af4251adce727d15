import numpy as np
import pytest
from scipy import stats as sps

from meanfield_clt import build_preset
from meanfield_clt import fluctuation as fl
from meanfield_clt.simulate import SimConfig, simulate_common_and_law


def test_functionals():
    states = np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2)
    grid = np.array([0.0, 0.5, 1.0])
    assert np.array_equal(fl.make_functional("terminal")(states, grid), states[:, -1, 0])
    np.testing.assert_allclose(fl.make_functional("time_average", coord=1)(states, grid), states[:, 1, 1])
    np.testing.assert_allclose(fl.make_functional("constant", value=2.5)(states, grid), [2.5, 2.5])
    z = fl.make_functional("zeta_terminal")(np.array([[[0.0, 3.0]], [[0.0, 0.4]]]), np.array([0.0]))
    np.testing.assert_allclose(z, [1.0, 0.4])
    thr = fl.make_functional("smooth_threshold", level=1.0)(states, grid)
    assert np.all((thr > 0) & (thr < 1))
    with pytest.raises(ValueError):
        fl.make_functional("nope")
    assert set(fl.FUNCTIONALS) >= {"terminal", "time_average", "zeta_time_average"}


def test_constant_functional_is_exact(example1, small_cfg):
    common = simulate_common_and_law(example1, small_cfg, 0)
    assert fl.estimate_m_phi(example1, small_cfg, fl.make_functional("constant", value=0.3), common, mc_size=500) == (0.3, 0.0)


def test_m2_must_be_at_least_two(example1, small_cfg):
    common = simulate_common_and_law(example1, small_cfg, 0)
    with pytest.raises(ValueError):
        fl.estimate_m_phi(example1, small_cfg, fl.make_functional("terminal"), common, mc_size=1)


def test_decoupled_conditional_mean(decoupled):
    cfg = SimConfig(ensemble_size=20, dt=0.1, horizon=1.0, seed=3)
    common = simulate_common_and_law(decoupled, cfg, 0)
    m, se = fl.estimate_m_phi(decoupled, cfg, fl.make_functional("terminal"), common, mc_size=10_000)
    assert abs(m) < 3 * se
    assert se == pytest.approx(np.sqrt(2.0 / 10_000), rel=0.05)


def test_se_scales_with_inverse_root_m2(decoupled):
    cfg = SimConfig(ensemble_size=10, dt=0.25, horizon=1.0, seed=4)
    phi = fl.make_functional("terminal")
    ratios = []
    for r in range(50):
        common = simulate_common_and_law(decoupled, cfg, r)
        _, se1 = fl.estimate_m_phi(decoupled, cfg, phi, common, mc_size=400, tag="a")
        _, se4 = fl.estimate_m_phi(decoupled, cfg, phi, common, mc_size=1600, tag="b")
        ratios.append(se1 / se4)
    assert np.mean(ratios) == pytest.approx(2.0, abs=0.2)


def test_m2_floor_enforced(example1):
    cfg = SimConfig(n_particles=50, ensemble_size=50, dt=0.1, horizon=0.2, mc_size=100)
    with pytest.raises(ValueError, match="100"):
        fl.fluctuation_ensemble(example1, cfg, fl.make_functional("terminal"), "pooled", reps=1)


def test_single_sample_tags(example1):
    cfg = SimConfig(n_particles=10, ensemble_size=50, dt=0.1, horizon=0.2, seed=1, replication_count=1)
    out = fl.fluctuation_ensemble(example1, cfg, fl.make_functional("terminal"), "conditional", common_rep=5)
    assert len(out) == 1
    s = out[0]
    assert (s.n_particles, s.phi_id, s.common_path_id, s.replication_id) == (10, "terminal[0]", 5, 0)
    assert set(s.as_row()) == {"value", "n_particles", "phi_id", "common_path_id", "replication_id", "m_hat", "m_hat_se"}


def test_bad_mode(example1, small_cfg):
    with pytest.raises(ValueError, match="mode"):
        fl.fluctuation_ensemble(example1, small_cfg, fl.make_functional("terminal"), "sideways", reps=1)


def test_decoupled_pooled_matches_classical_clt(decoupled):
    cfg = SimConfig(n_particles=200, ensemble_size=20, dt=0.25, horizon=1.0, seed=5)
    vals = fl.values(fl.fluctuation_ensemble(decoupled, cfg, fl.make_functional("terminal"), "pooled", reps=600))
    assert sps.kstest(vals, "norm", args=(0.0, np.sqrt(2.0))).statistic < 1.63 / np.sqrt(vals.size)


def test_conditional_mean_is_centered(example1):
    """Centering holds up to the error of m_hat, which has two parts: its own
    Monte Carlo SE and the O(M^-1/2) error of the ensemble law it is computed
    against; both are scaled by sqrt(N)."""
    N, M = 400, 200_000
    cfg = SimConfig(n_particles=N, ensemble_size=M, dt=0.05, horizon=0.5, seed=6, mc_size=M)
    samples = fl.fluctuation_ensemble(example1, cfg, fl.make_functional("terminal"), "conditional", reps=150)
    vals = fl.values(samples)
    sd = vals.std(ddof=1)
    se = sd / np.sqrt(vals.size)
    se_center = np.sqrt(N) * samples[0].m_hat_se
    ensemble = np.sqrt(N / M) * sd
    assert abs(vals.mean()) < 3 * np.sqrt(se**2 + se_center**2 + ensemble**2)


def test_threads_do_not_change_samples(example1, small_cfg):
    phi = fl.make_functional("terminal")
    a = fl.values(fl.fluctuation_ensemble(example1, small_cfg, phi, "pooled", threads=1))
    b = fl.values(fl.fluctuation_ensemble(example1, small_cfg, phi, "pooled", threads=3))
    assert np.array_equal(a, b)


def test_variance_decomposition_synthetic():
    rng = np.random.default_rng(0)
    centers = rng.normal(scale=0.5, size=40)
    groups = [c + rng.normal(size=200) for c in centers]
    pooled = rng.normal(scale=0.5, size=4000) + rng.normal(size=4000)
    dec = fl.variance_decomposition(pooled, groups)
    assert dec["holds"]
    assert dec["var_cond_mean"] == pytest.approx(0.25, abs=0.15)
    assert dec["pooled_var"] == pytest.approx(1.25, abs=0.1)
    with pytest.raises(ValueError):
        fl.variance_decomposition(pooled, groups[:1])


def test_finance_decomposition_small():
    spec = build_preset("finance")
    cfg = SimConfig(n_particles=30, ensemble_size=200, dt=0.1, horizon=1.0, seed=8)
    phi = fl.make_functional("zeta_time_average")
    pooled = fl.values(fl.fluctuation_ensemble(spec, cfg, phi, "pooled", reps=60))
    groups = [fl.values(fl.fluctuation_ensemble(spec, cfg, phi, "conditional", common_rep=100 + g, reps=15)) for g in range(4)]
    dec = fl.variance_decomposition(pooled, groups)
    assert dec["holds"]

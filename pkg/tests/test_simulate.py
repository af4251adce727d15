import dataclasses

import numpy as np
import pytest
from scipy import stats as sps

from meanfield_clt import MeasureView, build_preset
from meanfield_clt.model import SampleableMeasure
from meanfield_clt.simulate import (
    GridMismatch, SimConfig, SimulationError, simulate_common_and_law, simulate_iid_given_common,
    simulate_interacting, simulate_yN, yN_rate_experiment,
)

from conftest import custom_spec, zero_derivatives


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(dt=0.3, horizon=1.0)
    with pytest.raises(ValueError):
        SimConfig(n_particles=0)
    cfg = SimConfig(dt=0.1, horizon=1.0, n_particles=7)
    assert cfg.steps == 10 and cfg.grid[-1] == pytest.approx(1.0) and cfg.m2 == 700


def test_single_brownian_particle_variance():
    spec = custom_spec(init_mu0=SampleableMeasure.point([0.0]))
    cfg = SimConfig(n_particles=1, dt=0.25, horizon=1.0, seed=1)
    inc = np.array([simulate_interacting(spec, cfg, r).particles.states[0, -1, 0] for r in range(10_000)])
    sq = inc**2
    assert abs(sq.mean() - 1.0) < 3 * sq.std(ddof=1) / np.sqrt(sq.size)


def test_constant_rate_jump_counts_are_poisson():
    spec = build_preset("decoupled", {"jump_mass": 1.0, "rate": 0.5, "rate_upper": 2.0})
    cfg = SimConfig(n_particles=5000, dt=0.1, horizon=2.0, seed=3)
    ns = simulate_interacting(spec, cfg, 0, retain=True)
    ev = ns.particles.events
    counts = np.bincount(ev.pid[ev.accepted], minlength=5000)
    lam = 0.5 * 1.0 * 2.0
    assert abs(counts.mean() - lam) < 3 * np.sqrt(lam / 5000)
    assert abs(counts.var(ddof=1) - lam) < 0.1
    assert np.allclose(ev.rate, 0.5)


def test_jumps_add_marks_exactly():
    # zero drift and zero diffusion: the path moves only by accepted marks
    spec = build_preset("decoupled", {"jump_mass": 1.0, "rate": 1.0})
    spec = dataclasses.replace(spec, diffusion_sigma=np.zeros((1, 1)))
    cfg = SimConfig(n_particles=50, dt=0.1, horizon=1.0, seed=2)
    b = simulate_interacting(spec, cfg, 0, retain=True).particles
    ev = b.events
    jumps = np.bincount(ev.pid[ev.accepted], weights=ev.mark[ev.accepted, 0], minlength=50)
    np.testing.assert_allclose(b.states[:, -1, 0] - b.states[:, 0, 0], jumps, atol=1e-12)


def test_exchangeability_under_lane_permutation(example1):
    cfg = SimConfig(n_particles=30, dt=0.05, horizon=0.5, seed=4)
    perm = np.random.default_rng(0).permutation(30)
    a = simulate_interacting(example1, cfg, 0)
    b = simulate_interacting(example1, cfg, 0, lanes=perm)
    assert np.array_equal(a.particles.states[perm], b.particles.states)
    assert np.array_equal(a.common, b.common)


def test_determinism(example1, small_cfg):
    a = simulate_common_and_law(example1, small_cfg, 3)
    b = simulate_common_and_law(example1, small_cfg, 3)
    assert np.array_equal(a.y_path, b.y_path) and np.array_equal(a.cond_law, b.cond_law)


def test_empirical_measure_matches_states(example1, small_cfg):
    ns = simulate_interacting(example1, small_cfg, 1)
    assert np.array_equal(ns.emp_measure[4], ns.particles.states[:, 4])
    assert ns.particles.views()[2].weights.sum() == pytest.approx(1.0)


def test_decoupled_conditional_law_is_closed_form(decoupled):
    cfg = SimConfig(ensemble_size=4000, dt=0.05, horizon=1.0, seed=5)
    common = simulate_common_and_law(decoupled, cfg, 0)
    ks = sps.kstest(common.cond_law[-1, :, 0], "norm", args=(0.0, np.sqrt(1.0 + 1.0))).statistic
    assert ks < 1.63 / np.sqrt(4000) + 0.02


def test_exponential_integrator_scalar():
    a = -0.7
    spec = custom_spec(derivatives=zero_derivatives(b02=lambda y, nu: np.array([[a]]), vanishing=frozenset()))
    cfg = SimConfig(ensemble_size=10, dt=0.01, horizon=1.0)
    common = simulate_common_and_law(spec, cfg, 0)
    np.testing.assert_allclose(common.exp_integrator[:, 0, 0], np.exp(a * cfg.grid), rtol=1e-6)


def test_exponential_integrator_matrix():
    A = np.array([[-0.5, 0.2], [0.2, -0.3]])
    spec = build_preset("decoupled", {"dim_y": 2})
    spec = dataclasses.replace(spec, derivatives=zero_derivatives(1, 2, b02=lambda y, nu: A, vanishing=frozenset()))
    from scipy.linalg import expm

    cfg = SimConfig(ensemble_size=5, dt=0.05, horizon=1.0)
    common = simulate_common_and_law(spec, cfg, 0)
    np.testing.assert_allclose(common.exp_integrator[-1], expm(A), rtol=1e-10)


def test_conditional_independence_given_common(example1):
    cfg = SimConfig(ensemble_size=500, dt=0.05, horizon=0.5, seed=6)
    common = simulate_common_and_law(example1, cfg, 0)
    b = simulate_iid_given_common(example1, cfg, common, 2000, retain=False)
    v = np.tanh(b.states[:, -1, 0])
    a1, a2 = v[0::2], v[1::2]
    prod = (a1 - a1.mean()) * (a2 - a2.mean())
    assert abs(prod.mean()) < 3 * prod.std(ddof=1) / np.sqrt(prod.size)


def test_decoupled_iid_marginal_is_unconditional(decoupled):
    cfg = SimConfig(ensemble_size=50, dt=0.1, horizon=1.0, seed=8)
    common = simulate_common_and_law(decoupled, cfg, 0)
    b = simulate_iid_given_common(decoupled, cfg, common, 5000, retain=False)
    assert sps.kstest(b.states[:, -1, 0], "norm", args=(0.0, np.sqrt(2.0))).statistic < 1.63 / np.sqrt(5000)


def test_iid_edge_cases(example1, small_cfg):
    common = simulate_common_and_law(example1, small_cfg, 0)
    empty = simulate_iid_given_common(example1, small_cfg, common, 0)
    assert len(empty) == 0 and empty.retained
    whole = simulate_iid_given_common(example1, small_cfg, common, 37)
    chunked = simulate_iid_given_common(example1, small_cfg, common, 37, chunk=10)
    assert np.array_equal(whole.states, chunked.states)
    assert np.array_equal(whole.events.pid, chunked.events.pid)
    with pytest.raises(GridMismatch):
        simulate_iid_given_common(example1, dataclasses.replace(small_cfg, dt=0.025), common, 3)


def test_conditional_centering_on_ensemble(example1, small_cfg):
    common = simulate_common_and_law(example1, small_cfg, 0)
    der = example1.derivatives
    for node in (0, 5, 10):
        nu = common.law_view(node)
        pts = common.cond_law[node]
        c = der.b3c(pts[:5], common.y_path[node], nu, pts)
        assert np.abs(c.mean(axis=1)).max() < 1e-12


def test_non_finite_drift_aborts():
    spec = custom_spec(drift_b=lambda x, y, nu: np.full(x.shape, np.nan))
    with pytest.raises(SimulationError, match="drift"):
        simulate_interacting(spec, SimConfig(n_particles=3, dt=0.1, horizon=0.2), 0)


# ------------------------------------------------------------------ Y^N


def test_yN_equals_Y_when_common_drift_ignores_measure(decoupled, small_cfg):
    common = simulate_common_and_law(decoupled, small_cfg, 0)
    paths = simulate_iid_given_common(decoupled, small_cfg, common, 10, retain=False)
    assert np.array_equal(simulate_yN(decoupled, small_cfg, paths, common), common.y_path)


def _linear_common_spec(a):
    return custom_spec(
        drift_b0=lambda y, nu: a * y + nu.expect("mean", lambda p: p[:, 0]),
        diffusion_sigma0=np.zeros((1, 1)),
        init_rho0=SampleableMeasure.point([0.3]),
    )


@pytest.mark.parametrize("a", [-0.8, 0.5])
def test_yN_linear_drift_variation_of_constants(a):
    """``y' = a y + t`` (clouds with mean t) against the closed form, O(dt)."""
    spec = _linear_common_spec(a)
    errs = []
    for dt in (0.02, 0.01):
        cfg = SimConfig(ensemble_size=5, dt=dt, horizon=1.0)
        common = simulate_common_and_law(spec, cfg, 0)
        clouds = np.stack([np.array([[t - 1.0], [t + 1.0]]) for t in cfg.grid])
        yN = simulate_yN(spec, cfg, clouds, common)
        t = cfg.grid
        exact = (0.3 + 1 / a**2) * np.exp(a * t) - t / a - 1 / a**2
        errs.append(np.max(np.abs(yN[:, 0] - exact)))
    assert errs[0] < 0.05
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.15)


def test_yN_grid_mismatch(example1, small_cfg):
    common = simulate_common_and_law(example1, small_cfg, 0)
    with pytest.raises(GridMismatch):
        simulate_yN(example1, small_cfg, np.zeros((3, 2, 1)), common)


def test_yN_rate_small_and_thread_invariant(example1):
    cfg = SimConfig(ensemble_size=4000, dt=0.05, horizon=1.0, seed=11)
    rows1, fit1 = yN_rate_experiment(example1, cfg, [25, 100, 400], 30, threads=1)
    rows3, fit3 = yN_rate_experiment(example1, cfg, [25, 100, 400], 30, threads=3)
    assert rows1 == rows3
    assert -1.4 < fit1[0] < -0.6


def test_grid_refinement_weak_consistency(example1):
    """Halving dt moves E[tanh X_T] by less than the Monte Carlo error."""
    means, ses = [], []
    for dt in (0.02, 0.01):
        cfg = SimConfig(n_particles=200, dt=dt, horizon=0.5, seed=12)
        vals = [np.tanh(simulate_interacting(example1, cfg, r).particles.states[:, -1, 0]).mean() for r in range(60)]
        means.append(np.mean(vals))
        ses.append(np.std(vals, ddof=1) / np.sqrt(len(vals)))
    assert abs(means[0] - means[1]) < 3 * np.hypot(*ses)


def test_measure_view_rejects_empty_cloud():
    with pytest.raises(ValueError):
        MeasureView(np.zeros((0, 1)))

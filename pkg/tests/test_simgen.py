import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermognn.simgen import (ChainConfig, CouetteConfig, GeneratorError, chain_energy, chain_mechanical_energy,
                              check_chain_invariants, gen_couette_oldroydb, gen_damped_chain, integrate_chain,
                              integrate_couette)


def test_default_chain_invariants():
    cfg = ChainConfig()
    ds = gen_damped_chain(cfg, seed=0)
    assert len(ds) == 50 and ds.cases[0].n_nodes == 10
    for c in ds.cases:
        e = chain_energy(cfg, c.states)
        assert np.max(np.abs(e - e[0])) / abs(e[0]) < 1e-6
        assert np.diff(c.states[..., 2], axis=0).min() >= -1e-12


def test_chain_dissipates_mechanical_energy():
    cfg = ChainConfig(n_cases=3)
    c = gen_damped_chain(cfg, seed=1).cases[0]
    mech = chain_mechanical_energy(cfg, c.states)
    assert mech[-1] < 0.9 * mech[0]


def test_undamped_chain_conserves_mechanical_energy():
    cfg = ChainConfig(damping=0.0, n_cases=4)
    for c in gen_damped_chain(cfg, seed=2).cases:
        assert np.array_equal(c.states[..., 2], np.broadcast_to(c.states[0, :, 2], c.states[..., 2].shape))
        m = chain_mechanical_energy(cfg, c.states)
        assert np.max(np.abs(m - m[0])) / m[0] < 1e-8


def test_chain_at_rest_stays_put():
    cfg = ChainConfig(n_steps=10)
    z0 = np.zeros((1, cfg.n_nodes, 3))
    z0[0, :, 0] = np.arange(cfg.n_nodes) * cfg.spacing
    z0[0, :, 2] = 0.02
    traj = integrate_chain(cfg, z0)
    assert np.array_equal(traj, np.broadcast_to(z0, traj.shape))


def test_chain_ends_fixed():
    c = gen_damped_chain(ChainConfig(n_cases=2), seed=0).cases[1]
    assert np.all(c.states[:, [0, -1], :2] == c.states[0, [0, -1], :2])


def test_chain_drift_check_raises():
    cfg = ChainConfig(n_steps=5)
    states = np.zeros((3, cfg.n_nodes, 3))
    states[..., 2] = 1.0
    states[2, :, 2] = 2.0
    with pytest.raises(GeneratorError, match="substeps"):
        check_chain_invariants(cfg, states)


@pytest.mark.parametrize("bad", [{"mass": 0.0}, {"stiffness": -1.0}, {"heat_capacity": 0.0}, {"dt": 0.0}])
def test_chain_config_rejects_nonpositive_constants(bad):
    with pytest.raises(ValueError):
        ChainConfig(**bad)


@settings(max_examples=8)
@given(st.integers(0, 10_000))
def test_chain_invariants_for_any_seed(seed):
    cfg = ChainConfig(n_cases=2, n_steps=15)
    for c in gen_damped_chain(cfg, seed=seed).cases:
        assert check_chain_invariants(cfg, c.states)["energy_drift"] < 1e-6


def test_couette_reaches_linear_steady_state():
    cfg = CouetteConfig(n_cases=1)
    fields = integrate_couette(cfg, [0.5], [1.5], n_steps=int(15 / cfg.dt))
    v, tau = fields[-1, 0, :, 0], fields[-1, 0, :, 2]
    y = np.linspace(0, 1, cfg.n_nodes)
    assert np.max(np.abs(v - y)) < 1e-3
    assert np.max(np.abs(tau - 1.0)) < 1e-3


def test_couette_zero_lid_is_quiescent():
    ds = gen_couette_oldroydb(CouetteConfig(lid_velocity=0.0, n_cases=2, n_steps=10), seed=0)
    for c in ds.cases:
        assert np.all(c.states[..., 2:] == 0)


def test_couette_reference_grid():
    cfg = CouetteConfig()
    assert (cfg.n_nodes, cfg.dt, cfg.n_steps, cfg.n_cases) == (101, 6.7e-3, 150, 100)


def test_couette_dataset_layout():
    ds = gen_couette_oldroydb(CouetteConfig(n_cases=5, n_steps=3), seed=1)
    c = ds.cases[0]
    assert c.states.shape == (4, 101, 5)
    assert np.all(c.states[:, :, 0] == 0) and np.allclose(c.states[0, :, 1], np.linspace(0, 1, 101))
    re, we = np.stack([k.globals for k in ds.cases]).T
    assert np.all((0.1 <= re) & (re <= 1)) and np.all((1 <= we) & (we <= 2))
    assert np.all(np.diff(c.states[..., 3], axis=0) >= -1e-12)


def test_couette_latin_hypercube_strata():
    ds = gen_couette_oldroydb(CouetteConfig(n_cases=10, n_steps=1), seed=4)
    re = np.stack([k.globals for k in ds.cases])[:, 0]
    bins = np.floor((re - 0.1) / 0.09).astype(int).clip(0, 9)
    assert sorted(bins.tolist()) == list(range(10))


def test_couette_substep_halving():
    cfg = CouetteConfig(n_cases=1, n_steps=20)
    coarse = integrate_couette(cfg, [0.3], [1.2])
    from thermognn.simgen import couette_substeps

    sub = couette_substeps(cfg, [0.3], [1.2])
    fine = integrate_couette(cfg, [0.3], [1.2], substeps=2 * sub)
    assert np.max(np.abs(coarse - fine)) < 1e-6


def test_couette_cfl_violation():
    with pytest.raises(GeneratorError, match="CFL"):
        gen_couette_oldroydb(CouetteConfig(n_cases=1, n_steps=1, substeps=1), seed=0)

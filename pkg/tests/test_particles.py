import math

import numpy as np
import pytest

from openlat import build_domain_lattice, DomainSpec
from openlat.operators import assemble_walk
from openlat.particles import (
    Configuration,
    ParticleError,
    SimParams,
    init_pile,
    init_product,
    sample_stationary,
    simulate,
    spawn_seeds,
)

from conftest import site_at


# ---------------------------------------------------------------------------
# configurations and initial states


def test_configuration_validation(lat4):
    n = lat4.n_sites
    Configuration(lat4, np.zeros(n, dtype=int), -1)
    with pytest.raises(ParticleError):
        Configuration(lat4, np.zeros(n + 1, dtype=int), -1)
    with pytest.raises(ParticleError):
        Configuration(lat4, -np.ones(n, dtype=int), 1)
    with pytest.raises(ParticleError):
        Configuration(lat4, 2 * np.ones(n, dtype=int), -1)
    Configuration(lat4, 2 * np.ones(n, dtype=int), 1)


def test_init_product_exclusion_mean(square):
    lat = build_domain_lattice(square, 1.0 / 32.0)
    cfg = init_product(lat, 0.3, -1, seed=42)
    assert set(np.unique(cfg.occupation)) <= {0, 1}
    mean = cfg.occupation.mean()
    se = math.sqrt(0.3 * 0.7 / lat.n_sites)
    assert abs(mean - 0.3) < 4 * se


def test_init_product_inclusion_moments(square):
    lat = build_domain_lattice(square, 1.0 / 32.0)
    cfg = init_product(lat, 2.0, 1, seed=7)
    mean = cfg.occupation.mean()
    var = cfg.occupation.var()
    se = math.sqrt(2.0 / lat.n_sites)
    assert abs(mean - 2.0) < 4 * se
    assert abs(var - 2.0) < 0.6


def test_init_product_profile_and_errors(lat4):
    cfg = init_product(lat4, lambda p: 0.5 + 0.4 * p[0], -1, seed=1)
    assert cfg.n_particles <= lat4.n_sites
    with pytest.raises(ParticleError):
        init_product(lat4, 1.2, -1)
    with pytest.raises(ParticleError):
        init_product(lat4, -0.1, 1)


def test_init_pile(lat16):
    cfg = init_pile(lat16, (0.0, 0.0), 1)
    eps = lat16.eps
    height = math.floor(eps ** -1.0)
    dist = np.linalg.norm(lat16.coords, axis=1)
    inside = dist <= math.sqrt(eps)
    assert np.all(cfg.occupation[inside] == height)
    assert np.all(cfg.occupation[~inside] == 0)
    capped = init_pile(lat16, (0.0, 0.0), -1)
    assert set(np.unique(capped.occupation)) <= {0, 1}


def test_init_pile_far_center_warns(lat4):
    with pytest.warns(UserWarning, match="empty"):
        cfg = init_pile(lat4, (5.0, 5.0), 1)
    assert cfg.n_particles == 0


# ---------------------------------------------------------------------------
# exact simulation semantics


def test_empty_stays_empty_without_reservoir(lat4):
    params = SimParams(sigma=-1, beta=1.0, theta=0.0, horizon=2.0, seed=3)
    cfg = Configuration(lat4, np.zeros(lat4.n_sites, dtype=int), -1)
    traj = simulate(cfg, params, snapshot_times=[1.0, 2.0], log_events=True)
    assert traj.n_events == 0
    assert traj.final.n_particles == 0
    assert np.all(traj.snapshots == 0)


def test_closed_dynamics_conserves_particles(lat8):
    params = SimParams(sigma=-1, beta=math.inf, theta=0.0, horizon=0.5, seed=5)
    cfg = init_product(lat8, 0.4, -1, seed=9)
    total = cfg.n_particles
    traj = simulate(cfg, params, snapshot_times=np.linspace(0.05, 0.5, 6))
    assert traj.final.n_particles == total
    assert np.all(traj.snapshots.sum(axis=1) == total)
    assert traj.n_events > 0


def test_exclusion_constraint_preserved(lat8):
    params = SimParams(sigma=-1, beta=0.0, theta=0.9, horizon=0.3, seed=11)
    cfg = init_product(lat8, 0.5, -1, seed=12)
    traj = simulate(cfg, params, snapshot_times=np.linspace(0.0, 0.3, 10))
    assert traj.snapshots.max() <= 1
    assert traj.snapshots.min() >= 0


def test_event_log_replays_to_final_state(lat4):
    params = SimParams(sigma=1, beta=1.0, theta=0.7, horizon=0.8, seed=21)
    cfg = init_product(lat4, 0.5, 1, seed=2)
    traj = simulate(cfg, params, snapshot_times=[0.4, 0.8], log_events=True)
    assert traj.n_events > 0
    assert np.array_equal(traj.occupation_at(0.8), traj.final.occupation)
    assert np.array_equal(traj.occupation_at(0.4), traj.snapshots[0])
    # particle balance: final = initial + entries - exits (bulk conserves)
    entries = int(np.sum(traj.event_kinds == 2))
    exits = int(np.sum(traj.event_kinds == 1))
    assert traj.final.n_particles == cfg.n_particles + entries - exits


def test_reproducible_runs(lat4):
    params = SimParams(sigma=1, beta=0.5, theta=0.6, horizon=0.5, seed=33)
    cfg = init_product(lat4, 0.4, 1, seed=4)
    t1 = simulate(cfg, params, log_events=True)
    t2 = simulate(cfg, params, log_events=True)
    assert np.array_equal(t1.event_times, t2.event_times)
    assert np.array_equal(t1.event_sites, t2.event_sites)
    t3 = simulate(cfg, SimParams(sigma=1, beta=0.5, theta=0.6, horizon=0.5, seed=34),
                  log_events=True)
    assert t1.n_events != t3.n_events or not np.array_equal(t1.event_times, t3.event_times)


def test_rate_cache_audit_passes(lat4):
    params = SimParams(sigma=1, beta=0.0, theta=1.5, horizon=0.2, seed=8)
    cfg = init_product(lat4, 1.0, 1, seed=6)
    traj = simulate(cfg, params, check_every=1)
    assert traj.n_events > 100


def test_occupancy_guard_trips(square):
    lat = build_domain_lattice(square, 0.5)
    params = SimParams(
        sigma=1, beta=0.0, theta=5.0, horizon=50.0, seed=1, max_occupancy=3
    )
    cfg = Configuration(lat, np.zeros(1, dtype=int), 1)
    with pytest.raises(ParticleError, match="maximum"):
        simulate(cfg, params)


def test_log_overflow_raises(lat4):
    params = SimParams(sigma=1, beta=0.0, theta=1.0, horizon=5.0, seed=2)
    cfg = init_product(lat4, 1.0, 1, seed=3)
    with pytest.raises(ParticleError, match="overflow"):
        simulate(cfg, params, log_events=True, log_capacity=10)


def test_input_validation(lat4):
    params = SimParams(sigma=-1, beta=1.0, theta=0.5, horizon=1.0, seed=0)
    cfg = init_product(lat4, 0.5, -1, seed=0)
    with pytest.raises(ParticleError, match="sigma"):
        simulate(Configuration(lat4, cfg.occupation, 1), params)
    with pytest.raises(ParticleError, match="sorted"):
        simulate(cfg, params, snapshot_times=[0.5, 0.2])
    with pytest.raises(ParticleError, match="horizon"):
        simulate(cfg, params, snapshot_times=[2.0])
    with pytest.raises(ParticleError):
        SimParams(sigma=0, beta=1.0, theta=0.5, horizon=1.0)
    with pytest.raises(ParticleError, match="0, 1"):
        simulate(cfg, SimParams(sigma=-1, beta=1.0, theta=1.5, horizon=1.0))
    with pytest.raises(ParticleError, match="nonnegative"):
        simulate(cfg, SimParams(sigma=-1, beta=1.0, theta=-0.5, horizon=1.0))


# ---------------------------------------------------------------------------
# agreement with the walk kernel


def test_single_particle_marginal_matches_heat_kernel(lat4):
    t = 0.3
    start = site_at(lat4, (0.0, 0.0))
    op = assemble_walk(lat4, 1.0)
    e = np.zeros(lat4.n_sites)
    e[start] = 1.0
    exact = op.semigroup_apply(e, t)  # killed kernel row by symmetry

    replicas = 20000
    seeds = spawn_seeds(987, replicas)
    counts = np.zeros(lat4.n_sites)
    params = SimParams(sigma=-1, beta=1.0, theta=0.0, horizon=t, seed=0)
    base = np.zeros(lat4.n_sites, dtype=int)
    base[start] = 1
    cfg = Configuration(lat4, base, -1)
    for s in seeds:
        traj = simulate(cfg, params, snapshot_times=[t], seed_override=int(s))
        counts += traj.snapshots[0]
    phat = counts / replicas
    se = np.sqrt(np.maximum(exact * (1 - exact), 1e-12) / replicas)
    z = np.abs(phat - exact) / se
    assert np.max(z) < 4.0


def test_stationary_sampling_matches_product_measure(lat4):
    theta = 0.6
    params = SimParams(sigma=-1, beta=1.0, theta=theta, horizon=0.0, seed=55)
    lam0, _ = assemble_walk(lat4, 1.0).ground_state()
    samples = sample_stationary(lat4, params, 400, lam0=lam0)
    occ = np.stack([c.occupation for c in samples])
    mean = occ.mean(axis=0)
    se = math.sqrt(theta * (1 - theta) / len(samples))
    # spacing 2 / lam0 leaves little correlation; allow a margin for it
    assert np.max(np.abs(mean - theta)) < 5 * se


def test_stationary_sampling_requires_rate(lat4):
    params = SimParams(sigma=-1, beta=1.0, theta=0.5, horizon=0.0, seed=0)
    with pytest.raises(ParticleError, match="spectrum"):
        sample_stationary(lat4, params, 10)
    with pytest.raises(ParticleError, match="beta"):
        sample_stationary(
            lat4,
            SimParams(sigma=-1, beta=math.inf, theta=0.5, horizon=0.0),
            10,
            lam0=1.0,
        )


def test_spawn_seeds_deterministic():
    a = spawn_seeds(123, 5)
    b = spawn_seeds(123, 5)
    assert np.array_equal(a, b)
    assert len(np.unique(a)) == 5

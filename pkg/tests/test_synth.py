import math

import numpy as np
import pytest

from fragmix import storage
from fragmix.errors import ConfigError, IntegrationError
from fragmix.geometry import radius_graph
from fragmix.synth import (DoubleWell1D, OrnsteinUhlenbeck, OverdampedLangevin, ToyPolymer, TwoStateChain,
                           dihedral_angles, embed_line, generate, grid_transition_matrix, make_system,
                           oracle_timescales, write_dataset, write_oracle)


def test_noiseless_ou_decays_exponentially():
    system = OrnsteinUhlenbeck(theta=1.0, sigma=0.0, dt=1e-3, save_every=100, x0=2.0)
    traj = generate(system, 11, 1)[0]
    t = np.arange(11) * 0.1
    np.testing.assert_allclose(traj.coordinates[:, 0], 2.0 * np.exp(-t), rtol=1e-3)
    energy = system.potential(traj.coordinates[:, 0])
    assert np.all(np.diff(energy) <= 0)


def test_same_seed_same_trajectories():
    system = DoubleWell1D()
    a = generate(system, 30, 2, seed=5)
    b = generate(system, 30, 2, seed=5)
    c = generate(system, 30, 2, seed=6)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.positions, y.positions)
    assert not np.array_equal(a[0].coordinates, c[0].coordinates)
    assert not np.array_equal(a[0].coordinates[1:], a[1].coordinates[1:])


def test_unstable_step_is_rejected():
    with pytest.raises(IntegrationError):
        generate(DoubleWell1D(barrier=10.0, dt=0.01), 10, 1)
    with pytest.raises(IntegrationError):
        generate(OrnsteinUhlenbeck(theta=200.0, dt=0.01), 10, 1)


def test_integrator_step():
    step = OverdampedLangevin(gamma=2.0, kT=0.5).step(np.array([1.0]), lambda x: -x, 0.1, np.array([1.0]))
    np.testing.assert_allclose(step, 1.0 - 0.05 + math.sqrt(0.05))


def test_line_embedding_encodes_coordinate():
    positions = embed_line(np.array([0.5, -1.0]))
    assert positions.shape == (2, 4, 3)
    np.testing.assert_allclose(np.diff(positions[0, :, 0]), 4.5)
    np.testing.assert_allclose(np.diff(positions[1, :, 0]), 3.0)


@pytest.mark.slow
def test_symmetric_wells_are_equally_occupied():
    system = DoubleWell1D(barrier=1.0)
    trajs = generate(system, 25_000, 4, seed=2)
    occupancy = np.mean(np.concatenate([system.well(t.coordinates[:, 0]) for t in trajs]))
    assert abs(occupancy - 0.5) < 0.05


def test_polymer_forces_are_potential_gradients(rng):
    polymer = ToyPolymer()
    x = polymer.build(1.0) + 0.2 * rng.standard_normal((12, 3))
    h = 1e-5
    numeric = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        numeric[idx] = -(polymer.potential(up) - polymer.potential(down)) / (2 * h)
    np.testing.assert_allclose(polymer.force(x), numeric, rtol=1e-4, atol=1e-5)


def test_polymer_states_are_minima_with_different_graphs():
    polymer = ToyPolymer()
    trans, cis = polymer.build(math.pi), polymer.build(0.0)
    assert polymer.potential(trans) == pytest.approx(0.0, abs=1e-9)
    assert polymer.potential(cis) == pytest.approx(0.0, abs=1e-9)
    assert abs(polymer.hinge_angle(trans)) == pytest.approx(math.pi, abs=1e-9)
    assert polymer.hinge_angle(cis) == pytest.approx(0.0, abs=1e-9)
    others = np.delete(dihedral_angles(trans), polymer.hinge)
    np.testing.assert_allclose(np.abs(others), math.pi, atol=1e-9)
    assert radius_graph(trans, 10.0).edge_set() != radius_graph(cis, 10.0).edge_set()


def test_polymer_trajectories_write_positions(tmp_path):
    polymer = ToyPolymer()
    trajs = generate(polymer, 5, 2, seed=0)
    assert trajs[0].positions.shape == (5, 12, 3)
    manifest = storage.read_manifest(write_dataset(tmp_path, polymer, trajs))
    positions, residue_index, anchor, ligand_mask = storage.read_positions(tmp_path / manifest.trajectories[1].positions)
    np.testing.assert_array_equal(positions, trajs[1].positions)
    np.testing.assert_array_equal(anchor, np.arange(12))
    assert manifest.frame_interval == pytest.approx(polymer.dt * polymer.save_every)


def test_chain_tokens_are_one_hot():
    traj = generate(TwoStateChain(stay=0.8), 200, 1, seed=3)[0]
    assert traj.tokens.shape == (200, 1, 2)
    np.testing.assert_array_equal(traj.tokens[:, 0].argmax(axis=1), traj.coordinates[:, 0])


def test_grid_operator_is_stochastic():
    p, centres = grid_transition_matrix(DoubleWell1D(), 200)
    assert p.shape == (200, 200) and len(centres) == 200
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_ou_oracle_matches_relaxation_time():
    ts = oracle_timescales(OrnsteinUhlenbeck(theta=1.0, sigma=1.0, dt=0.01), lag=0.5, n_bins=200)
    assert ts[0] == pytest.approx(1.0, rel=0.02)
    assert ts[1] == pytest.approx(0.5, rel=0.05)


def test_ou_oracle_refinement_converges():
    system = OrnsteinUhlenbeck(theta=1.0, sigma=1.0, dt=0.01)
    coarse, mid, fine = (oracle_timescales(system, 0.5, n_bins=n)[0] for n in (100, 200, 400))
    assert abs(fine - mid) <= abs(mid - coarse) + 1e-3


def test_double_well_has_one_slow_mode():
    ts = oracle_timescales(DoubleWell1D(barrier=5.0), lag=0.1)
    assert ts[0] / ts[1] > 10


def test_oracle_is_lag_invariant():
    system = DoubleWell1D()
    short = oracle_timescales(system, lag=0.05)[0]
    long = oracle_timescales(system, lag=0.1)[0]
    assert long == pytest.approx(short, rel=0.02)


def test_chain_oracle():
    ts = oracle_timescales(TwoStateChain(stay=0.9), lag=1.0)
    assert ts[0] == pytest.approx(-1.0 / math.log(0.8))


def test_oracle_csv(tmp_path):
    write_oracle(tmp_path / "oracle.csv", np.array([2.0, 0.5]), lag=1.0)
    lines = (tmp_path / "oracle.csv").read_text().splitlines()
    assert lines[0] == "rank,eigenvalue,timescale"
    assert lines[1].startswith("1,") and lines[1].endswith(",2.0")


def test_make_system_rejects_unknown():
    with pytest.raises(ConfigError):
        make_system("lorenz")
    assert isinstance(make_system("ou", theta="2.0"), OrnsteinUhlenbeck)

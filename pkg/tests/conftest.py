import numpy as np
import pytest

from fragmix import synth
from fragmix.geometry import Topology, featurize_trajectory
from fragmix.models import ModelConfig, RunConfig
from fragmix.pipeline import Trajectory, TrajectoryDataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """Tiny full pipeline: H=8, 2 heads, 1 mixer layer, no dropout"""
    return ModelConfig(hidden_dim=8, n_heads=2, n_layers=1, window=2, dropout=0.0, cutoff=6.0, output_dim=2)


@pytest.fixture
def chain_anchors():
    def make(batch, n, seed=0):
        steps = np.random.default_rng(seed).standard_normal((batch, n, 3))
        steps *= 3.8 / np.linalg.norm(steps, axis=-1, keepdims=True)
        return np.cumsum(steps, axis=1)
    return make


@pytest.fixture
def two_state_dataset():
    """Four one-hot token trajectories of a symmetric two-state chain (stay probability 0.9)"""
    def make(n_frames=2000, n_traj=4, seed=0):
        rng = np.random.default_rng(seed)
        trajs = []
        for i in range(n_traj):
            flips = rng.random(n_frames - 1) >= 0.9
            states = np.concatenate([[0], np.cumsum(flips) % 2])
            trajs.append(Trajectory(f"t{i}", np.eye(2)[states][:, None, :], coordinates=states[:, None].astype(float)))
        return TrajectoryDataset(trajs, frame_interval=1.0)
    return make


@pytest.fixture
def chain_run_config():
    return RunConfig.from_pairs({
        "encoder": "mean", "hidden_dim": "2", "n_heads": "1", "output_dim": "1", "dropout": "0.0",
        "batch_size": "500", "max_epochs": "2", "validation_interval": "5", "lag_ns": "1.0",
        "validation_fraction": "0.25",
    })


@pytest.fixture
def featurized():
    """Synthetic trajectories turned into residue tokens, with anchors and generating coordinates"""
    def make(system, n_frames, n_traj, seed=0, hidden=16):
        trajs = []
        for traj in synth.generate(system, n_frames, n_traj, seed):
            topology = Topology.one_atom_per_residue(traj.positions.shape[1])
            tokens = featurize_trajectory(traj.positions, topology, hidden)
            trajs.append(Trajectory(traj.name, tokens, traj.positions, traj.coordinates))
        return TrajectoryDataset(trajs, synth.frame_interval(system))
    return make

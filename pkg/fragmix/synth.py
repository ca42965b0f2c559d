"""
Synthetic dynamics with known kinetics: Ornstein-Uhlenbeck, a 1D double well,
a 12-bead toy polymer with a two-state hinge dihedral, and a two-state Markov
chain. Grid transfer operators give reference timescales for the 1D systems.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import norm

from . import storage
from .errors import ConfigError, IntegrationError
from .models import DatasetManifest, TrajectoryEntry
from .msm import MarkovStateModel, implied_timescales

logger = logging.getLogger(__name__)

ForceFunc = Callable[[np.ndarray], np.ndarray]

# residue spacing (Angstrom) used to embed a 1D coordinate as a 4-residue chain
EMBED_RESIDUES = 4
EMBED_SPACING = 4.0


class OverdampedLangevin:
    """Euler-Maruyama for dx = F/gamma dt + sqrt(2 kT / gamma) dW"""

    def __init__(self, gamma: float = 1.0, kT: float = 1.0):
        self.gamma = gamma
        self.kT = kT

    def step(self, x: np.ndarray, force_fn: ForceFunc, dt: float, noise: np.ndarray) -> np.ndarray:
        return x + force_fn(x) / self.gamma * dt + math.sqrt(2.0 * self.kT * dt / self.gamma) * noise

    def run(self, x0: np.ndarray, force_fn: ForceFunc, dt: float, n_frames: int, save_every: int,
            generators: Sequence[np.random.Generator]) -> np.ndarray:
        """
        x0 has one row per trajectory; generators[i] drives trajectory i.
        Returns (n_frames, n_trajectories, ...) with x0 as the first frame.
        """
        x = np.array(x0, dtype=np.float64)
        frames = np.empty((n_frames,) + x.shape)
        if n_frames == 0:
            return frames
        frames[0] = x
        shape = x.shape[1:]
        for frame in range(1, n_frames):
            noise = np.stack([g.standard_normal((save_every,) + shape) for g in generators], axis=1)
            for k in range(save_every):
                x = self.step(x, force_fn, dt, noise[k])
            if not np.all(np.isfinite(x)):
                raise IntegrationError(f"integration diverged before frame {frame} (dt={dt})")
            frames[frame] = x
        return frames


class OrnsteinUhlenbeck(BaseModel):
    """dx = -theta x dt + sigma dW"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["ou"] = "ou"
    theta: float = Field(1.0, gt=0)
    sigma: float = Field(1.0, ge=0)
    dt: float = Field(0.01, gt=0)
    save_every: int = Field(10, ge=1)
    x0: Optional[float] = Field(None, description="Start value; drawn from the stationary law when unset")

    def force(self, x: np.ndarray) -> np.ndarray:
        return -self.theta * x

    def potential(self, x: np.ndarray) -> np.ndarray:
        return 0.5 * self.theta * x ** 2

    @property
    def integrator(self) -> OverdampedLangevin:
        return OverdampedLangevin(gamma=1.0, kT=0.5 * self.sigma ** 2)

    def check_stable(self) -> None:
        if self.theta * self.dt >= 1.0:
            raise IntegrationError(f"theta*dt = {self.theta * self.dt:g} must stay below 1")

    def initial(self, rng: np.random.Generator, index: int) -> float:
        if self.x0 is not None:
            return self.x0
        if self.sigma == 0:
            return 1.0
        return rng.normal(0.0, self.sigma / math.sqrt(2.0 * self.theta))

    def grid(self) -> Tuple[float, float]:
        spread = 6.0 * max(self.sigma / math.sqrt(2.0 * self.theta), 1e-3)
        return -spread, spread


class DoubleWell1D(BaseModel):
    """U(x) = barrier * (x^2 - 1)^2 with minima at x = +-1"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["doublewell"] = "doublewell"
    barrier: float = Field(3.0, gt=0, description="Barrier height in units of kT=1")
    kT: float = Field(1.0, gt=0)
    friction: float = Field(1.0, gt=0)
    dt: float = Field(1e-3, gt=0)
    save_every: int = Field(10, ge=1)

    def force(self, x: np.ndarray) -> np.ndarray:
        return -4.0 * self.barrier * x * (x ** 2 - 1.0)

    def potential(self, x: np.ndarray) -> np.ndarray:
        return self.barrier * (x ** 2 - 1.0) ** 2

    @property
    def integrator(self) -> OverdampedLangevin:
        return OverdampedLangevin(gamma=self.friction, kT=self.kT)

    def check_stable(self) -> None:
        # curvature at the minima is 8 * barrier
        if self.dt * 8.0 * self.barrier / self.friction >= 0.5:
            raise IntegrationError(f"dt={self.dt:g} is too large for barrier {self.barrier:g}")

    def initial(self, rng: np.random.Generator, index: int) -> float:
        return -1.0 if index % 2 == 0 else 1.0

    def grid(self) -> Tuple[float, float]:
        return -2.0, 2.0

    def well(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) > 0).astype(np.int64)


def _unit(v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norm_ = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm_, 1e-12), norm_


def _cos_gradient(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """cos of the angle between a and b, with its gradients wrt a and b"""
    ua, na = _unit(a)
    ub, nb = _unit(b)
    c = np.sum(ua * ub, axis=-1, keepdims=True)
    return c[..., 0], (ub - c * ua) / np.maximum(na, 1e-12), (ua - c * ub) / np.maximum(nb, 1e-12)


def dihedral_angles(x: np.ndarray) -> np.ndarray:
    """Signed dihedral angles of consecutive bead quadruples, shape (..., n_beads - 3)"""
    b1, b2, b3 = x[..., 1:-2, :] - x[..., :-3, :], x[..., 2:-1, :] - x[..., 1:-2, :], x[..., 3:, :] - x[..., 2:-1, :]
    m, n = np.cross(b1, b2), np.cross(b2, b3)
    y = np.sum(np.cross(m, n) * _unit(b2)[0], axis=-1)
    return np.arctan2(y, np.sum(m * n, axis=-1))


class ToyPolymer(BaseModel):
    """
    Bead chain with harmonic bonds, cosine-harmonic angles and one hinge
    dihedral U = barrier * sin^2(phi) (minima at phi = 0 and pi); every other
    dihedral prefers trans through k (1 + cos phi)
    """
    model_config = ConfigDict(extra="forbid")

    kind: Literal["polymer"] = "polymer"
    n_beads: int = Field(12, ge=8)
    hinge: int = Field(4, ge=0, description="First bead of the hinge dihedral quadruple")
    bond_length: float = Field(3.8, gt=0)
    bond_k: float = Field(10.0, gt=0)
    angle: float = Field(110.0, gt=0, lt=180, description="Equilibrium bond angle in degrees")
    angle_k: float = Field(20.0, ge=0)
    dihedral_k: float = Field(1.0, ge=0)
    barrier: float = Field(3.0, ge=0)
    kT: float = Field(1.0, gt=0)
    friction: float = Field(1.0, gt=0)
    dt: float = Field(0.01, gt=0)
    save_every: int = Field(10, ge=1)

    @property
    def integrator(self) -> OverdampedLangevin:
        return OverdampedLangevin(gamma=self.friction, kT=self.kT)

    def check_stable(self) -> None:
        if self.hinge + 3 >= self.n_beads:
            raise ConfigError(f"hinge quadruple starting at bead {self.hinge} does not fit {self.n_beads} beads")
        if self.dt * 2.0 * self.bond_k / self.friction >= 0.5:
            raise IntegrationError(f"dt={self.dt:g} is too large for bond stiffness {self.bond_k:g}")

    def build(self, hinge_angle: float) -> np.ndarray:
        """Chain placed from internal coordinates: all dihedrals trans except the hinge"""
        theta = math.radians(self.angle)
        x = np.zeros((self.n_beads, 3))
        x[1] = [self.bond_length, 0.0, 0.0]
        x[2] = x[1] + self.bond_length * np.array([-math.cos(theta), math.sin(theta), 0.0])
        for i in range(3, self.n_beads):
            phi = hinge_angle if i - 3 == self.hinge else math.pi
            a, b, c = x[i - 3], x[i - 2], x[i - 1]
            bc = _unit(c - b)[0]
            n = _unit(np.cross(b - a, bc))[0]
            m = np.cross(n, bc)
            local = self.bond_length * np.array([-math.cos(theta), math.sin(theta) * math.cos(phi),
                                                 math.sin(theta) * math.sin(phi)])
            x[i] = c + local[0] * bc + local[1] * m + local[2] * n
        return x

    def force(self, x: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(x)
        # bonds
        bond = x[..., 1:, :] - x[..., :-1, :]
        unit, length = _unit(bond)
        g = 2.0 * self.bond_k * (length - self.bond_length) * unit
        grad[..., 1:, :] += g
        grad[..., :-1, :] -= g
        # angles: k (cos - cos0)^2 around the middle bead
        a, b = x[..., :-2, :] - x[..., 1:-1, :], x[..., 2:, :] - x[..., 1:-1, :]
        c, dca, dcb = _cos_gradient(a, b)
        du = (2.0 * self.angle_k * (c - math.cos(math.radians(self.angle))))[..., None]
        grad[..., :-2, :] += du * dca
        grad[..., 2:, :] += du * dcb
        grad[..., 1:-1, :] -= du * (dca + dcb)
        # dihedrals through cos(phi) of the plane normals m = b1 x b2, n = b2 x b3
        b1, b2, b3 = x[..., 1:-2, :] - x[..., :-3, :], x[..., 2:-1, :] - x[..., 1:-2, :], x[..., 3:, :] - x[..., 2:-1, :]
        m, n = np.cross(b1, b2), np.cross(b2, b3)
        c, dcm, dcn = _cos_gradient(m, n)
        du = np.full(c.shape, self.dihedral_k)
        du[..., self.hinge] = -2.0 * self.barrier * c[..., self.hinge]
        gm, gn = du[..., None] * dcm, du[..., None] * dcn
        gb1 = np.cross(b2, gm)
        gb2 = np.cross(gm, b1) + np.cross(b3, gn)
        gb3 = np.cross(gn, b2)
        grad[..., :-3, :] -= gb1
        grad[..., 1:-2, :] += gb1 - gb2
        grad[..., 2:-1, :] += gb2 - gb3
        grad[..., 3:, :] += gb3
        return -grad

    def potential(self, x: np.ndarray) -> np.ndarray:
        bond = np.linalg.norm(x[..., 1:, :] - x[..., :-1, :], axis=-1)
        c_angle = _cos_gradient(x[..., :-2, :] - x[..., 1:-1, :], x[..., 2:, :] - x[..., 1:-1, :])[0]
        phi = dihedral_angles(x)
        hinge = np.zeros(phi.shape[-1], dtype=bool)
        hinge[self.hinge] = True
        dihedral = np.where(hinge, self.barrier * np.sin(phi) ** 2, self.dihedral_k * (1.0 + np.cos(phi)))
        return (self.bond_k * np.sum((bond - self.bond_length) ** 2, axis=-1)
                + self.angle_k * np.sum((c_angle - math.cos(math.radians(self.angle))) ** 2, axis=-1)
                + np.sum(dihedral, axis=-1))

    def initial(self, rng: np.random.Generator, index: int) -> np.ndarray:
        return self.build(math.pi if index % 2 == 0 else 0.0)

    def hinge_angle(self, positions: np.ndarray) -> np.ndarray:
        return dihedral_angles(positions)[..., self.hinge]


class TwoStateChain(BaseModel):
    """Discrete Markov chain over two states, emitted as one-hot tokens of one residue"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["chain"] = "chain"
    stay: float = Field(0.9, gt=0, lt=1, description="Probability of staying in the current state")
    dt: float = Field(1.0, gt=0)
    save_every: int = Field(1, ge=1)

    @property
    def transition(self) -> np.ndarray:
        return np.array([[self.stay, 1.0 - self.stay], [1.0 - self.stay, self.stay]])

    def check_stable(self) -> None:
        return None

    def sample(self, n_frames: int, rng: np.random.Generator) -> np.ndarray:
        states = np.zeros(n_frames, dtype=np.int64)
        if n_frames == 0:
            return states
        states[0] = rng.integers(2)
        flips = rng.random(n_frames - 1) >= self.stay
        states[1:] = (states[0] + np.cumsum(flips)) % 2
        return states


SyntheticSystem = Union[OrnsteinUhlenbeck, DoubleWell1D, ToyPolymer, TwoStateChain]
SYSTEMS = {"ou": OrnsteinUhlenbeck, "doublewell": DoubleWell1D, "polymer": ToyPolymer, "chain": TwoStateChain}


def make_system(kind: str, **params) -> SyntheticSystem:
    if kind not in SYSTEMS:
        raise ConfigError(f"unknown system '{kind}' (choose from {', '.join(SYSTEMS)})")
    return SYSTEMS[kind](**params)


@dataclass
class GeneratedTrajectory:
    name: str
    coordinates: np.ndarray
    positions: Optional[np.ndarray] = None
    tokens: Optional[np.ndarray] = None

    @property
    def n_frames(self) -> int:
        return len(self.coordinates)


def embed_line(x: np.ndarray) -> np.ndarray:
    """1D coordinate -> positions of a straight 4-residue chain with spacing 4 + x"""
    x = np.asarray(x, dtype=np.float64)
    positions = np.zeros(x.shape + (EMBED_RESIDUES, 3))
    positions[..., 0] = np.arange(EMBED_RESIDUES) * (EMBED_SPACING + x[..., None])
    return positions


def frame_interval(system: SyntheticSystem) -> float:
    return system.dt * system.save_every


def generate(system: SyntheticSystem, n_frames: int, n_trajectories: int, seed: int = 0) -> List[GeneratedTrajectory]:
    """Independent trajectories, each driven by its own child of SeedSequence(seed)"""
    if n_frames < 1 or n_trajectories < 1:
        raise ConfigError("need at least one frame and one trajectory")
    system.check_stable()
    generators = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_trajectories)]
    names = [f"traj{i:03d}" for i in range(n_trajectories)]

    if isinstance(system, TwoStateChain):
        out = []
        for name, rng in zip(names, generators):
            states = system.sample(n_frames, rng)
            out.append(GeneratedTrajectory(name, states[:, None].astype(np.float64),
                                           tokens=np.eye(2)[states][:, None, :]))
        return out

    x0 = np.stack([np.asarray(system.initial(g, i), dtype=np.float64) for i, g in enumerate(generators)])
    frames = system.integrator.run(x0, system.force, system.dt, n_frames, system.save_every, generators)
    out = []
    for i, name in enumerate(names):
        traj = frames[:, i]
        if isinstance(system, ToyPolymer):
            out.append(GeneratedTrajectory(name, system.hinge_angle(traj)[:, None], positions=traj))
        else:
            out.append(GeneratedTrajectory(name, traj[:, None], positions=embed_line(traj)))
    logger.info("generated %d %s trajectories of %d frames", n_trajectories, system.kind, n_frames)
    return out


def write_dataset(directory: Path, system: SyntheticSystem, trajectories: Sequence[GeneratedTrajectory],
                  seed: int = 0) -> Path:
    """Position (or token) files, coordinate CSVs and manifest.json under ``directory``"""
    directory = Path(directory)
    entries = []
    hidden = None
    for traj in trajectories:
        entry = TrajectoryEntry(name=traj.name, n_frames=traj.n_frames, coordinates=f"{traj.name}.coords.csv")
        storage.write_coordinates(directory / entry.coordinates, traj.coordinates)
        if traj.positions is not None:
            n_res = traj.positions.shape[1]
            entry.positions = f"{traj.name}.pos"
            storage.write_positions(directory / entry.positions, traj.positions, np.arange(n_res), np.arange(n_res),
                                    np.zeros(n_res, dtype=bool))
        if traj.tokens is not None:
            entry.tokens = f"{traj.name}.tok"
            storage.write_tokens(directory / entry.tokens, traj.tokens)
            hidden = traj.tokens.shape[-1]
        entries.append(entry)
    manifest = DatasetManifest(system=system.kind, frame_interval=frame_interval(system), seed=seed,
                               hidden_dim=hidden, trajectories=entries)
    path = directory / "manifest.json"
    storage.write_manifest(path, manifest)
    return path


# -- reference timescales -------------------------------------------------------------

def grid_transition_matrix(system: Union[OrnsteinUhlenbeck, DoubleWell1D], n_bins: int = 200) -> Tuple[np.ndarray, np.ndarray]:
    """
    One-step Euler-Maruyama kernel integrated over bins; mass leaving the grid
    is returned to the boundary bins. Returns (P, bin centres)
    """
    if n_bins < 2:
        raise ConfigError("grid needs at least two bins")
    lo, hi = system.grid()
    edges = np.linspace(lo, hi, n_bins + 1)
    centres = 0.5 * (edges[1:] + edges[:-1])
    integrator = system.integrator
    mean = centres + system.force(centres) / integrator.gamma * system.dt
    spread = math.sqrt(2.0 * integrator.kT * system.dt / integrator.gamma)
    if spread == 0:
        raise ConfigError("grid operator needs a noisy system")
    cdf = norm.cdf((edges[None, :] - mean[:, None]) / spread)
    p = np.diff(cdf, axis=1)
    p[:, 0] += cdf[:, 0]
    p[:, -1] += 1.0 - cdf[:, -1]
    return p / p.sum(axis=1, keepdims=True), centres


def oracle_timescales(system: SyntheticSystem, lag: float, n_bins: int = 200, n_timescales: int = 5,
                      n_steps: int = 1_000_000, seed: int = 0) -> np.ndarray:
    """Leading implied timescales at lag time ``lag`` (system time units)"""
    if isinstance(system, TwoStateChain):
        return implied_timescales(np.linalg.matrix_power(system.transition, max(1, round(lag / system.dt))), lag)[:n_timescales]
    if isinstance(system, ToyPolymer):
        return _polymer_timescales(system, lag, n_bins, n_steps, seed)[:n_timescales]
    steps = round(lag / system.dt)
    if steps < 1:
        raise ConfigError(f"lag {lag} is shorter than the integration step {system.dt}")
    p, _ = grid_transition_matrix(system, n_bins)
    return implied_timescales(np.linalg.matrix_power(p, steps), steps * system.dt)[:n_timescales]


def _polymer_timescales(system: ToyPolymer, lag: float, n_bins: int, n_steps: int, seed: int) -> np.ndarray:
    """Transition counting on the binned hinge dihedral of one long trajectory"""
    system.check_stable()
    every = system.save_every
    n_frames = n_steps // every + 1
    rng = np.random.default_rng(seed)
    frames = system.integrator.run(system.initial(rng, 0)[None], system.force, system.dt, n_frames, every, [rng])
    phi = system.hinge_angle(frames[:, 0])
    bins = np.clip(((phi + math.pi) / (2.0 * math.pi) * n_bins).astype(np.int64), 0, n_bins - 1)
    lag_frames = max(1, round(lag / frame_interval(system)))
    visited, labels = np.unique(bins, return_inverse=True)
    model = MarkovStateModel.estimate([labels], lag_frames, len(visited))
    return model.timescales(frame_interval(system))


def write_oracle(path: Path, timescales: np.ndarray, lag: float) -> None:
    rows = ((rank + 1, math.exp(-lag / t) if t > 0 else 0.0, t) for rank, t in enumerate(timescales))
    storage.write_csv(path, ("rank", "eigenvalue", "timescale"), rows)

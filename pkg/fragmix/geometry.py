"""
Radius graphs over residue anchors and rigid-motion-invariant residue tokens.
"""
from __future__ import annotations

from dataclasses import dataclass
import hashlib
import logging
from pathlib import Path
import threading
from typing import Iterator, Optional

import numpy as np
from scipy.spatial.distance import cdist

from . import storage
from .errors import ConfigError, GraphError, InputError

logger = logging.getLogger(__name__)

NEIGHBOR_SLOTS = 8
DENSITY_RADII = (6.0, 8.0, 10.0)
DESCRIPTOR_COUNT = NEIGHBOR_SLOTS + len(DENSITY_RADII) + 2
# distances enter the descriptor in nm so every slot is O(1)
LENGTH_SCALE = 10.0
# frames * N * N distances held at once while building graphs or descriptors
DISTANCE_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class Topology:
    """Atom-to-residue assignment shared by every frame of a trajectory"""
    residue_index: np.ndarray
    anchor: np.ndarray
    ligand_mask: np.ndarray

    @property
    def n_atoms(self) -> int:
        return len(self.residue_index)

    @property
    def n_residues(self) -> int:
        return len(self.anchor)

    @classmethod
    def one_atom_per_residue(cls, n: int, ligand_mask: Optional[np.ndarray] = None) -> "Topology":
        idx = np.arange(n, dtype=np.int64)
        mask = np.zeros(n, dtype=bool) if ligand_mask is None else np.asarray(ligand_mask, dtype=bool)
        return cls(idx, idx.copy(), mask)

    def validate(self) -> None:
        res = np.asarray(self.residue_index)
        n = self.n_residues
        if res.size == 0 or n == 0:
            raise InputError("topology has no atoms")
        if res.min() < 0 or res.max() != n - 1 or len(np.unique(res)) != n:
            raise InputError("residue ids must be contiguous from 0")
        if np.any(self.anchor < 0) or np.any(self.anchor >= len(res)) or np.any(res[self.anchor] != np.arange(n)):
            raise InputError("every residue needs exactly one anchor atom inside it")
        if len(self.ligand_mask) != n:
            raise InputError("ligand mask must have one entry per residue")


@dataclass(frozen=True)
class Frame:
    """Atom positions (Angstrom) of one snapshot together with its topology"""
    positions: np.ndarray
    topology: Topology

    @property
    def residue_index(self) -> np.ndarray:
        return self.topology.residue_index

    @property
    def anchor(self) -> np.ndarray:
        return self.topology.anchor

    @property
    def ligand_mask(self) -> np.ndarray:
        return self.topology.ligand_mask

    def anchors(self) -> np.ndarray:
        return self.positions[self.topology.anchor]

    def validate(self) -> None:
        self.topology.validate()
        if self.positions.shape != (self.topology.n_atoms, 3):
            raise InputError(f"positions shape {self.positions.shape} does not match {self.topology.n_atoms} atoms")
        if not np.all(np.isfinite(self.positions)):
            raise InputError("non-finite atom coordinates")


@dataclass(frozen=True)
class RadiusGraph:
    """Directed, symmetric edge list (i, j) over n_nodes points"""
    edges: np.ndarray
    cutoff: float
    n_nodes: int

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n_nodes).astype(np.float64)

    def validate(self, n_nodes: int) -> None:
        if self.n_nodes != n_nodes:
            raise GraphError(f"graph has {self.n_nodes} nodes but features have {n_nodes} rows")
        if self.n_edges and (self.edges.min() < 0 or self.edges.max() >= n_nodes):
            raise GraphError(f"edge index out of range for {n_nodes} nodes")

    def tile(self, copies: int) -> "RadiusGraph":
        """Block-diagonal union of ``copies`` relabelled copies"""
        offsets = (np.arange(copies, dtype=np.int64) * self.n_nodes)[:, None, None]
        edges = (self.edges[None] + offsets).reshape(-1, 2)
        return RadiusGraph(edges, self.cutoff, self.n_nodes * copies)

    def edge_set(self) -> set:
        return {(int(i), int(j)) for i, j in self.edges}


@dataclass(frozen=True)
class TokenSet:
    """Residue tokens of one frame, shape (N, H)"""
    tokens: np.ndarray

    @property
    def n_residues(self) -> int:
        return self.tokens.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.tokens.shape[1]


def _frame_chunks(n_frames: int, n: int) -> Iterator[slice]:
    step = max(1, DISTANCE_CHUNK_ELEMENTS // max(n * n, 1))
    for start in range(0, n_frames, step):
        yield slice(start, min(start + step, n_frames))


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    """(B, N, 3) -> (B, N, N) euclidean distances, one frame at a time"""
    return np.stack([cdist(frame, frame) for frame in points])


def batch_radius_graph(anchors: np.ndarray, cutoff: float) -> RadiusGraph:
    """
    Radius graph of every frame in anchors[B, N, 3], frames relabelled to
    disjoint node ranges b*N .. b*N+N-1
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.ndim != 3 or anchors.shape[-1] != 3 or anchors.shape[1] < 1:
        raise InputError(f"anchors must have shape (B, N>=1, 3), got {anchors.shape}")
    if cutoff <= 0:
        raise ConfigError(f"cutoff must be positive, got {cutoff}")
    if not np.all(np.isfinite(anchors)):
        raise InputError("non-finite anchor coordinates")
    n_frames, n = anchors.shape[:2]
    edges = []
    for chunk in _frame_chunks(n_frames, n):
        within = _pairwise_distances(anchors[chunk]) <= cutoff
        within[:, np.arange(n), np.arange(n)] = False
        frame, i, j = np.nonzero(within)
        frame += chunk.start
        edges.append(np.stack([frame * n + i, frame * n + j], axis=1).astype(np.int64))
    return RadiusGraph(np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64), float(cutoff),
                       n_frames * n)


def radius_graph(anchors: np.ndarray, cutoff: float) -> RadiusGraph:
    """All ordered pairs (i, j), i != j, with |r_i - r_j| <= cutoff"""
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.ndim != 2:
        raise InputError(f"anchors must have shape (N, 3), got {anchors.shape}")
    return batch_radius_graph(anchors[None], cutoff)


def _projection(hidden: int, seed: int) -> np.ndarray:
    """Fixed (D, H) matrix with orthonormal rows"""
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((hidden, DESCRIPTOR_COUNT)))
    return q.T


def residue_descriptors(positions: np.ndarray, topology: Topology) -> np.ndarray:
    """
    Invariant descriptors (L, N, D): sorted distances to the nearest anchors,
    neighbour counts at DENSITY_RADII, atom count and radius of gyration
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim == 2:
        positions = positions[None]
    if not np.all(np.isfinite(positions)):
        raise InputError("non-finite atom coordinates")
    n_frames = positions.shape[0]
    n = topology.n_residues
    res = topology.residue_index

    nearest = np.zeros((n_frames, n, NEIGHBOR_SLOTS))
    density = np.zeros((n_frames, n, len(DENSITY_RADII)))
    k = min(NEIGHBOR_SLOTS, n - 1)
    for chunk in _frame_chunks(n_frames, n):
        dist = _pairwise_distances(positions[chunk][:, topology.anchor])
        dist[:, np.arange(n), np.arange(n)] = np.inf
        if k > 0:
            nearest[chunk, :, :k] = np.sort(dist, axis=-1)[..., :k] / LENGTH_SCALE
        for slot, r in enumerate(DENSITY_RADII):
            density[chunk, :, slot] = (dist <= r).sum(axis=-1)

    counts = np.bincount(res, minlength=n).astype(np.float64)
    centroid = np.zeros((n_frames, n, 3))
    np.add.at(centroid, (slice(None), res), positions)
    centroid /= counts[None, :, None]
    spread = np.zeros((n_frames, n))
    np.add.at(spread, (slice(None), res), np.sum((positions - centroid[:, res]) ** 2, axis=-1))
    gyration = np.sqrt(spread / counts[None]) / LENGTH_SCALE

    return np.concatenate([
        nearest, density,
        np.broadcast_to(counts, (n_frames, n))[..., None], gyration[..., None]], axis=-1)


def featurize_trajectory(positions: np.ndarray, topology: Topology, hidden: int, seed: int = 0) -> np.ndarray:
    """Residue tokens (L, N, H) for every frame of a trajectory"""
    if hidden < DESCRIPTOR_COUNT:
        raise ConfigError(f"hidden dim {hidden} is smaller than the {DESCRIPTOR_COUNT} invariant descriptors")
    topology.validate()
    return residue_descriptors(positions, topology) @ _projection(hidden, seed)


def featurize_residue(frame: Frame, hidden: int, seed: int = 0) -> TokenSet:
    frame.validate()
    return TokenSet(featurize_trajectory(frame.positions[None], frame.topology, hidden, seed)[0])


class TokenCache:
    """
    Per-trajectory token files under one directory. Computed once, then reused
    while the coordinates, topology, width and projection seed stay the same;
    writes are serialised and atomic, reads need no lock
    """

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self._lock = threading.Lock()

    def path_for(self, name: str) -> Path:
        return self.directory / f"{name}.tok"

    def key_path_for(self, name: str) -> Path:
        return self.directory / f"{name}.tok.key"

    @staticmethod
    def content_key(positions: np.ndarray, topology: Topology, hidden: int, seed: int) -> str:
        digest = hashlib.sha256(f"H={hidden};seed={seed};".encode())
        for array in (np.asarray(positions, dtype=np.float64), np.asarray(topology.residue_index, dtype=np.int64),
                      np.asarray(topology.anchor, dtype=np.int64)):
            digest.update(repr(array.shape).encode())
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    def _is_current(self, name: str, expected_header, key: str) -> bool:
        path, key_path = self.path_for(name), self.key_path_for(name)
        if not (path.exists() and key_path.exists()):
            return False
        return storage.read_token_header(path) == expected_header and key_path.read_text().strip() == key

    def get(self, name: str, positions: np.ndarray, topology: Topology, hidden: int, seed: int = 0) -> np.ndarray:
        path = self.path_for(name)
        expected = (topology.n_residues, hidden, len(positions))
        key = self.content_key(positions, topology, hidden, seed)
        if self._is_current(name, expected, key):
            logger.debug("token cache hit for %s", name)
            return storage.read_tokens(path)
        with self._lock:
            if self._is_current(name, expected, key):
                return storage.read_tokens(path)
            logger.info("featurizing %s (%d frames, %d residues, H=%d)", name, len(positions), topology.n_residues, hidden)
            tokens = featurize_trajectory(positions, topology, hidden, seed)
            storage.write_tokens(path, tokens)
            storage.atomic_write(self.key_path_for(name), (key + "\n").encode())
        # hand back exactly what later cache hits will return
        return storage.read_tokens(path)

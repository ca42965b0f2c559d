"""
Markov state models from per-frame state labels: unsymmetrised sliding-window
transition counts, row-normalised transition matrices and implied timescales.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse

from . import storage
from .errors import ConfigError, InputError

logger = logging.getLogger(__name__)


def _validate_labels(labels: Sequence[np.ndarray]) -> List[np.ndarray]:
    out = []
    for i, traj in enumerate(labels):
        traj = np.asarray(traj)
        if traj.ndim != 1:
            raise InputError(f"labels of trajectory {i} must be one-dimensional")
        if traj.size and (traj.min() < 0 or not np.issubdtype(traj.dtype, np.integer)):
            raise InputError(f"labels of trajectory {i} must be non-negative integers")
        out.append(traj.astype(np.int64))
    return out


def count_transitions(labels: Sequence[np.ndarray], lag: int, n_states: Optional[int] = None) -> np.ndarray:
    """
    C[a, b] = number of (t, t+lag) pairs inside one trajectory with s_t = a and
    s_{t+lag} = b, counted at every t
    """
    if lag < 1:
        raise ConfigError(f"lag must be >= 1 frame, got {lag}")
    labels = _validate_labels(labels)
    if n_states is None:
        n_states = max((int(t.max()) + 1 for t in labels if t.size), default=0)
    counts = scipy.sparse.coo_matrix((n_states, n_states), dtype=np.int64)
    for traj in labels:
        if traj.size and traj.max() >= n_states:
            raise InputError(f"label {int(traj.max())} outside [0, {n_states})")
        if len(traj) <= lag:
            continue
        transitions = np.vstack((traj[:-lag], traj[lag:]))
        counts = counts + scipy.sparse.coo_matrix(
            (np.ones(transitions.shape[1], dtype=np.int64), transitions), shape=(n_states, n_states))
    return np.asarray(counts.todense(), dtype=np.int64)


def transition_matrix(counts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row-normalised counts. Rows without outgoing counts become identity rows;
    returns (T, zero_row_mask)
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise InputError(f"count matrix must be square, got {counts.shape}")
    if np.any(counts < 0):
        raise InputError("count matrix has negative entries")
    weights = counts.sum(axis=1)
    zero_rows = weights == 0
    inv_weights = np.zeros(len(weights))
    inv_weights[~zero_rows] = 1.0 / weights[~zero_rows]
    transition = counts * inv_weights[:, None]
    transition[zero_rows, zero_rows] = 1.0
    if zero_rows.any():
        logger.warning("states %s have no outgoing counts; treated as absorbing", np.flatnonzero(zero_rows).tolist())
    return transition, zero_rows


def implied_timescales(transition: np.ndarray, lag_ns: float) -> np.ndarray:
    """
    t_i = -lag / ln|lambda_i| over eigenvalues with modulus below 1, slowest
    first; a complex-conjugate pair enters once, through its modulus
    """
    transition = np.asarray(transition, dtype=np.float64)
    if not np.allclose(transition.sum(axis=1), 1.0, atol=1e-10):
        raise InputError("transition matrix is not row-stochastic")
    eigenvalues = np.linalg.eigvals(transition)
    # eigenvalues of a real matrix come as exact conjugate pairs
    moduli = np.sort(np.abs(eigenvalues[eigenvalues.imag >= 0]))[::-1]
    moduli = moduli[moduli < 1.0 - 1e-12]
    with np.errstate(divide="ignore"):
        return np.where(moduli > 0, -lag_ns / np.log(np.maximum(moduli, 1e-300)), 0.0)


@dataclass
class MarkovStateModel:
    counts: np.ndarray
    transition: np.ndarray
    populations: np.ndarray
    lag: int
    zero_rows: np.ndarray
    n_frames: int

    @property
    def n_states(self) -> int:
        return self.counts.shape[0]

    @classmethod
    def estimate(cls, labels: Sequence[np.ndarray], lag: int, n_states: Optional[int] = None) -> "MarkovStateModel":
        labels = _validate_labels(labels)
        counts = count_transitions(labels, lag, n_states)
        transition, zero_rows = transition_matrix(counts)
        frames = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
        if frames.size == 0:
            raise InputError("no labelled frames")
        populations = np.bincount(frames, minlength=counts.shape[0]) / frames.size
        logger.info("MSM with %d states from %d transitions at lag %d", counts.shape[0], int(counts.sum()), lag)
        return cls(counts, transition, populations, lag, zero_rows, int(frames.size))

    def timescales(self, frame_time_ns: float) -> np.ndarray:
        return implied_timescales(self.transition, self.lag * frame_time_ns)

    def permuted(self, order: np.ndarray) -> "MarkovStateModel":
        """Same model with state i renamed to order[i]"""
        inverse = np.argsort(order)
        grid = np.ix_(inverse, inverse)
        return MarkovStateModel(self.counts[grid], self.transition[grid], self.populations[inverse], self.lag,
                                self.zero_rows[inverse], self.n_frames)

    def edge_rows(self, frame_time_ns: float, threshold: int = 1):
        """
        (from, to, count, rate_per_ns) for every off-diagonal edge with
        count >= threshold; the rate is the count over the simulated time
        n_frames * frame_time_ns
        """
        if frame_time_ns <= 0:
            raise ConfigError(f"frame time must be positive, got {frame_time_ns}")
        observed_ns = self.n_frames * frame_time_ns
        for a, b in zip(*np.nonzero(self.counts)):
            if a != b and self.counts[a, b] >= threshold:
                yield int(a), int(b), int(self.counts[a, b]), float(self.counts[a, b] / observed_ns)

    def node_rows(self, labels: Sequence[np.ndarray], descriptors: Optional[np.ndarray] = None):
        """(state, population, mean descriptor columns...) per state"""
        frames = np.concatenate(_validate_labels(labels))
        for state in range(self.n_states):
            row = [state, float(self.populations[state])]
            if descriptors is not None:
                members = descriptors[frames == state]
                means = members.mean(axis=0) if len(members) else np.full(descriptors.shape[1], np.nan)
                row.extend(float(v) for v in means)
            yield row

    def write(self, directory: Path, labels: Sequence[np.ndarray], frame_time_ns: float, threshold: int = 1,
              descriptors: Optional[np.ndarray] = None) -> None:
        directory = Path(directory)
        storage.write_csv(directory / "edges.csv", ("from_state", "to_state", "count", "rate_per_ns"),
                          self.edge_rows(frame_time_ns, threshold))
        header = ["state", "population"]
        if descriptors is not None:
            descriptors = np.asarray(descriptors, dtype=np.float64).reshape(len(descriptors), -1)
            header += [f"mean_c{i}" for i in range(descriptors.shape[1])]
        storage.write_csv(directory / "nodes.csv", header, self.node_rows(labels, descriptors))
        storage.write_csv(directory / "counts.csv", [f"s{i}" for i in range(self.n_states)], self.counts.tolist())

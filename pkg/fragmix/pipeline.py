"""
Datasets, train/validation splits, lagged-pair minibatches, the training loop
and the runtime/memory profiler.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
import math
from pathlib import Path
import queue
import threading
import time
import tracemalloc
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import storage
from . import tensor_core as tc
from .encoder import FragmentEncoder, FrameBatch, build_encoder
from .errors import ConfigError, InputError, NumericalFailureError, SplitError
from .mixer import attention_blockwise, attention_naive
from .models import GraphOperatorKind, ModelConfig, ProfileRow, RunConfig, ScoreRecord, SplitSpec, TrainConfig
from .nn import Adam, Module, dropout_context, grad_norm
from .objectives import (SpibModel, VampHead, VampModel, assign_states, compact_labels, kmeans, spib_loss,
                         vamp2_score)
from .tensor_core import Tensor
from .tmm import fragment_count

logger = logging.getLogger(__name__)

# frames per profiled step
PROFILE_BATCH = 1000


# -- datasets -----------------------------------------------------------------

@dataclass
class Trajectory:
    """Frames of one independent trajectory (or one temporal fragment of it)"""
    name: str
    tokens: np.ndarray
    anchors: Optional[np.ndarray] = None
    coordinates: Optional[np.ndarray] = None
    start: int = 0

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[0]

    def slice(self, begin: int, end: int, suffix: str) -> "Trajectory":
        cut = slice(begin, end)
        return Trajectory(
            f"{self.name}{suffix}", self.tokens[cut],
            None if self.anchors is None else self.anchors[cut],
            None if self.coordinates is None else self.coordinates[cut],
            self.start + begin)


@dataclass
class TrajectoryDataset:
    trajectories: List[Trajectory]
    frame_interval: float
    stride: int = 1
    ligand_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.frame_interval <= 0:
            raise ConfigError(f"frame interval must be positive, got {self.frame_interval}")
        shapes = {t.tokens.shape[1:] for t in self.trajectories}
        if len(shapes) > 1:
            raise InputError(f"trajectories disagree on (N, H): {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def lengths(self) -> List[int]:
        return [t.n_frames for t in self.trajectories]

    @property
    def n_frames(self) -> int:
        return sum(self.lengths)

    @property
    def hidden_dim(self) -> int:
        return self.trajectories[0].tokens.shape[-1]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.int64)

    def lag_frames(self, lag_ns: float) -> int:
        lag = round(lag_ns / (self.frame_interval * self.stride))
        if lag < 1:
            raise ConfigError(f"lag {lag_ns} ns is shorter than one (strided) frame of "
                              f"{self.frame_interval * self.stride} ns")
        return lag

    def subsample(self, stride: int) -> "TrajectoryDataset":
        if stride < 1:
            raise ConfigError(f"stride must be >= 1, got {stride}")
        if stride == 1:
            return self
        trajs = [Trajectory(t.name, t.tokens[::stride],
                            None if t.anchors is None else t.anchors[::stride],
                            None if t.coordinates is None else t.coordinates[::stride], t.start)
                 for t in self.trajectories]
        return TrajectoryDataset(trajs, self.frame_interval, self.stride * stride, self.ligand_mask)

    def subset(self, trajectories: List[Trajectory]) -> "TrajectoryDataset":
        return replace(self, trajectories=trajectories)

    def frames(self, flat_index: np.ndarray) -> FrameBatch:
        """Gather frames by their index into the concatenation of all trajectories"""
        tokens, anchors = self._stacked()
        return FrameBatch(tokens[flat_index], None if anchors is None else anchors[flat_index], self.ligand_mask)

    def all_frames(self) -> FrameBatch:
        return self.frames(np.arange(self.n_frames))

    def coordinates(self) -> Optional[np.ndarray]:
        if any(t.coordinates is None for t in self.trajectories):
            return None
        return np.concatenate([t.coordinates for t in self.trajectories])

    def _stacked(self) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        cache = self.__dict__.get("_stack")
        if cache is None:
            tokens = np.concatenate([t.tokens for t in self.trajectories])
            anchors = None
            if all(t.anchors is not None for t in self.trajectories):
                anchors = np.concatenate([t.anchors for t in self.trajectories])
            cache = self.__dict__["_stack"] = (tokens, anchors)
        return cache

    @classmethod
    def load(cls, manifest_path: Path, stride: int = 1) -> "TrajectoryDataset":
        """Read a featurized dataset: token files plus anchors from the position files"""
        manifest_path = Path(manifest_path)
        manifest = storage.read_manifest(manifest_path)
        root = manifest_path.parent
        trajs = []
        ligand_mask = None
        for entry in manifest.trajectories:
            if entry.tokens is None:
                raise InputError(f"trajectory {entry.name} has no token file; run featurize first")
            tokens = storage.read_tokens(root / entry.tokens)
            anchors = None
            if entry.positions is not None:
                positions, _, anchor, ligand_mask = storage.read_positions(root / entry.positions)
                anchors = positions[:, anchor]
            coords = storage.read_coordinates(root / entry.coordinates) if entry.coordinates else None
            trajs.append(Trajectory(entry.name, tokens, anchors, coords))
        if not trajs:
            raise InputError(f"manifest {manifest_path} lists no trajectories")
        mask = None if ligand_mask is None or not ligand_mask.any() else ligand_mask
        return cls(trajs, manifest.frame_interval, 1, mask).subsample(stride)


def split(dataset: TrajectoryDataset, spec: SplitSpec) -> Tuple[TrajectoryDataset, TrajectoryDataset]:
    """Hold out whole trajectories (or temporal fragments of them) for validation"""
    if spec.split_mode == "by-temporal-fragment":
        units = []
        for traj in dataset.trajectories:
            bounds = np.linspace(0, traj.n_frames, spec.n_fragments + 1).round().astype(int)
            units.extend(traj.slice(a, b, f"#{i}") for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])))
    else:
        units = list(dataset.trajectories)
    if len(units) < 2:
        raise SplitError(f"need at least 2 units to split, got {len(units)}")
    n_val = int(round(spec.validation_fraction * len(units)))
    if n_val == 0 or n_val == len(units):
        raise SplitError(f"validation fraction {spec.validation_fraction} of {len(units)} units leaves "
                         f"{'no validation' if n_val == 0 else 'no training'} data")
    chosen = set(np.random.default_rng(spec.seed).permutation(len(units))[:n_val].tolist())
    train = [u for i, u in enumerate(units) if i not in chosen]
    val = [u for i, u in enumerate(units) if i in chosen]
    logger.info("split %d units: %d train, %d validation (%s)", len(units), len(train), len(val), spec.split_mode)
    return dataset.subset(train), dataset.subset(val)


def lagged_pairs(n_frames: int, lag: int) -> int:
    """Number of (t, t+lag) pairs inside one trajectory"""
    if lag < 1:
        raise ConfigError(f"lag must be >= 1 frame, got {lag}")
    return max(n_frames - lag, 0)


def enumerate_pairs(lengths: Sequence[int], lag: int) -> np.ndarray:
    """(P, 2) flat frame indices (t, t+lag) that never cross a trajectory boundary"""
    chunks = []
    offset = 0
    for i, length in enumerate(lengths):
        count = lagged_pairs(length, lag)
        if count == 0:
            logger.warning("trajectory %d has %d frames, not more than the lag %d; skipped", i, length, lag)
        else:
            start = offset + np.arange(count)
            chunks.append(np.stack([start, start + lag], axis=1))
        offset += length
    if not chunks:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(chunks).astype(np.int64)


def prefetch(items: Iterable, depth: int = 2) -> Iterator:
    """Produce items on a worker thread through a bounded queue; order is preserved"""
    handoff: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()
    done = object()

    def hand_over(item) -> bool:
        while not stop.is_set():
            try:
                handoff.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def worker():
        try:
            for item in items:
                if not hand_over(item):
                    return
        except Exception as err:
            hand_over(err)
            return
        hand_over(done)

    threading.Thread(target=worker, daemon=True).start()
    try:
        while True:
            item = handoff.get()
            if item is done:
                return
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()


# -- objectives as seen by the trainer -------------------------------------------

class VampObjective:
    name = "vamp"

    def __init__(self, eps: float = 1e-6):
        self.eps = eps

    def loss(self, model: Module, x0: FrameBatch, xt: FrameBatch, targets: Optional[np.ndarray], seed) -> Tensor:
        # one forward pass over both lag times
        out = model(FrameBatch.concat(x0, xt))
        n = len(x0)
        return -vamp2_score(out[:n], out[n:], self.eps)

    def evaluate(self, model: Module, data: TrajectoryDataset, pairs: np.ndarray,
                 targets: Optional[np.ndarray], batch_size: int) -> float:
        chunks0, chunks_t = [], []
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            chunks0.append(model(data.frames(chunk[:, 0])).data)
            chunks_t.append(model(data.frames(chunk[:, 1])).data)
        return vamp2_score(np.concatenate(chunks0), np.concatenate(chunks_t), self.eps).item()


class SpibObjective:
    """Negated SPIB loss; targets are the labels of the later frame of each pair"""
    name = "spib"

    def loss(self, model: SpibModel, x0: FrameBatch, xt: FrameBatch, targets: Optional[np.ndarray], seed) -> Tensor:
        return spib_loss(model, model(x0), targets, seed)

    def evaluate(self, model: SpibModel, data: TrajectoryDataset, pairs: np.ndarray,
                 targets: Optional[np.ndarray], batch_size: int) -> float:
        total = 0.0
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            loss = spib_loss(model, model(data.frames(chunk[:, 0])), targets[start:start + batch_size], seed=start)
            total -= loss.item() * len(chunk)
        return total / len(pairs)


# -- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_score: float
    best_step: int
    steps: int
    history: List[ScoreRecord] = field(default_factory=list)
    best_state: Dict[str, np.ndarray] = field(default_factory=dict)
    stop_reason: str = "max_epochs"

    def curve_rows(self) -> Iterator[Tuple]:
        for record in self.history:
            yield record.step, record.train_score, record.val_score


class Trainer:
    """
    Adam over uniformly shuffled lagged pairs. Validation runs every
    ``validation_interval`` steps; the best validation state is restored at the end.
    """

    def __init__(self, model: Module, objective, config: TrainConfig, learning_rate: Optional[float] = None,
                 validation_patience: Optional[int] = None):
        self.model = model
        self.objective = objective
        self.config = config
        self.learning_rate = config.resolved_learning_rate(objective.name) if learning_rate is None else learning_rate
        self.validation_patience = validation_patience or config.validation_patience
        self.optimizer = Adam(model.parameters(), self.learning_rate)
        model.index_dropout_sites()

    def _validate(self, data: TrajectoryDataset, pairs: np.ndarray, targets: Optional[np.ndarray]) -> float:
        self.model.eval()
        with tc.no_grad():
            score = self.objective.evaluate(self.model, data, pairs, targets, self.config.batch_size)
        self.model.train()
        return score

    def _batches(self, pairs: np.ndarray, rng: np.random.Generator) -> Iterator[np.ndarray]:
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), self.config.batch_size):
            yield order[start:start + self.config.batch_size]

    def fit(self, train: TrajectoryDataset, val: TrajectoryDataset, lag: int,
            train_labels: Optional[np.ndarray] = None, val_labels: Optional[np.ndarray] = None,
            max_epochs: Optional[int] = None) -> TrainResult:
        cfg = self.config
        train_pairs = enumerate_pairs(train.lengths, lag)
        val_pairs = enumerate_pairs(val.lengths, lag)
        if len(train_pairs) == 0 or len(val_pairs) == 0:
            raise SplitError(f"lag {lag} leaves no {'training' if len(train_pairs) == 0 else 'validation'} pairs")
        train_targets = None if train_labels is None else np.asarray(train_labels)[train_pairs[:, 1]]
        val_targets = None if val_labels is None else np.asarray(val_labels)[val_pairs[:, 1]]

        rng = np.random.default_rng(cfg.seed)
        result = TrainResult(best_score=-math.inf, best_step=0, steps=0, best_state=self.model.state_dict())
        best_train = -math.inf
        train_stall = 0
        val_stall = 0
        last_norm = 0.0
        step = 0
        self.model.train()
        for _ in range(max_epochs or cfg.max_epochs):
            if result.stop_reason != "max_epochs":
                break
            batches = ((idx, train.frames(train_pairs[idx, 0]), train.frames(train_pairs[idx, 1]))
                       for idx in self._batches(train_pairs, rng))
            for idx, x0, xt in prefetch(batches):
                targets = None if train_targets is None else train_targets[idx]
                with dropout_context(cfg.seed, step):
                    loss = self.objective.loss(self.model, x0, xt, targets, [cfg.seed, step])
                if not np.isfinite(loss.data):
                    logger.error("non-finite loss at step %d", step)
                    raise NumericalFailureError("training loss is not finite", term="loss", step=step,
                                                lr=self.learning_rate, grad_norm=last_norm)
                self.optimizer.zero_grad()
                loss.backward()
                last_norm = grad_norm(self.model.parameters())
                if not np.isfinite(last_norm):
                    logger.error("non-finite gradient at step %d", step)
                    raise NumericalFailureError("gradient is not finite", term="gradient", step=step,
                                                lr=self.learning_rate, grad_norm=last_norm)
                self.optimizer.step()
                step += 1
                train_score = -loss.item()

                if train_score > best_train:
                    best_train, train_stall = train_score, 0
                else:
                    train_stall += 1
                if step % cfg.validation_interval == 0:
                    val_stall = self._record(result, step, train_score, val, val_pairs, val_targets, val_stall)
                    if val_stall >= self.validation_patience:
                        result.stop_reason = "validation_patience"
                        break
                if train_stall >= cfg.training_patience:
                    result.stop_reason = "training_patience"
                    break

        if not result.history or result.history[-1].step != step:
            self._record(result, step, train_score, val, val_pairs, val_targets, val_stall)
        result.steps = step
        self.model.load_state_dict(result.best_state)
        logger.info("training stopped after %d steps (%s); best validation %.6f at step %d",
                    step, result.stop_reason, result.best_score, result.best_step)
        return result

    def _record(self, result: TrainResult, step: int, train_score: float, val: TrajectoryDataset,
                val_pairs: np.ndarray, val_targets: Optional[np.ndarray], stall: int) -> int:
        score = self._validate(val, val_pairs, val_targets)
        result.history.append(ScoreRecord(step=step, train_score=train_score, val_score=score))
        logger.info("step %d: train %.6f, validation %.6f", step, train_score, score)
        if score > result.best_score:
            result.best_score, result.best_step = score, step
            result.best_state = self.model.state_dict()
            return 0
        return stall + 1


def train(model: Module, objective, data: Tuple[TrajectoryDataset, TrajectoryDataset], config: TrainConfig,
          lag: Optional[int] = None, labels: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> TrainResult:
    """Fit ``model`` on (train, validation) datasets; lag defaults to the configured lag in ns"""
    train_data, val_data = data
    lag = train_data.lag_frames(config.lag_ns) if lag is None else lag
    train_labels, val_labels = labels if labels is not None else (None, None)
    return Trainer(model, objective, config).fit(train_data, val_data, lag, train_labels, val_labels)


def write_scores(path: Path, result: TrainResult) -> None:
    storage.write_csv(path, ("step", "train_score", "val_score"), result.curve_rows())


# -- model assembly -------------------------------------------------------------------

def build_vamp_model(config: ModelConfig, n_in: int, seed: int) -> VampModel:
    rng = np.random.default_rng(seed)
    encoder = build_encoder(config, rng)
    return VampModel(encoder, VampHead(n_in if config.encoder == "mean" else config.hidden_dim, config.output_dim, rng))


def build_spib_model(run: RunConfig, n_in: int, n_states: int, seed: int) -> SpibModel:
    rng = np.random.default_rng(seed)
    encoder = build_encoder(run.network, rng)
    width = n_in if run.network.encoder == "mean" else run.network.hidden_dim
    return SpibModel(encoder, width, n_states, run.spib, rng)


def embed(model: Module, data: TrajectoryDataset, batch_size: int) -> np.ndarray:
    """Model outputs for every frame, in evaluation mode"""
    model.eval()
    with tc.no_grad():
        chunks = [model(data.frames(np.arange(s, min(s + batch_size, data.n_frames)))).data
                  for s in range(0, data.n_frames, batch_size)]
    model.train()
    return np.concatenate(chunks)


@dataclass
class SpibResult:
    model: SpibModel
    train_labels: np.ndarray
    val_labels: np.ndarray
    rounds: List[TrainResult]
    converged: bool

    @property
    def best_score(self) -> float:
        return self.rounds[-1].best_score

    @property
    def n_states(self) -> int:
        return self.model.n_states


def train_spib(run: RunConfig, train_data: TrajectoryDataset, val_data: TrajectoryDataset,
               init_points: Optional[Tuple[np.ndarray, np.ndarray]] = None, seed: Optional[int] = None) -> SpibResult:
    """
    k-means initial labels, then rounds of training interleaved with label
    refinement until fewer than ``refine_tolerance`` of the frames change state
    """
    seed = run.training.seed if seed is None else seed
    lag = train_data.lag_frames(run.training.lag_ns)
    model = build_spib_model(run, train_data.hidden_dim, 1, seed)
    if init_points is None:
        init_points = (embed(model, train_data, run.training.batch_size), embed(model, val_data, run.training.batch_size))
    clusters = kmeans(init_points[0], min(run.spib.n_init_states, len(init_points[0])), seed)
    train_labels = clusters.assignments
    val_labels = np.argmin(((init_points[1][:, None] - clusters.centroids[None]) ** 2).sum(-1), axis=1)
    model = build_spib_model(run, train_data.hidden_dim, clusters.k, seed)
    logger.info("SPIB initialised with %d k-means states", clusters.k)

    rounds = []
    converged = False
    for refinement in range(run.spib.max_refinements):
        trainer = Trainer(model, SpibObjective(), run.training, validation_patience=run.spib.refine_patience)
        rounds.append(trainer.fit(train_data, val_data, lag, train_labels, val_labels,
                                  max_epochs=run.spib.refine_interval))
        h = np.concatenate([embed(model.encoder, train_data, run.training.batch_size),
                            embed(model.encoder, val_data, run.training.batch_size)])
        old = np.concatenate([train_labels, val_labels])
        assigned = assign_states(model, h)
        changed = float(np.mean(assigned != old))
        new = compact_labels(model, assigned)
        train_labels, val_labels = new[:train_data.n_frames], new[train_data.n_frames:]
        logger.info("refinement %d: %d states, %.2f%% of frames changed", refinement + 1, model.n_states,
                    100.0 * changed)
        if changed < run.spib.refine_tolerance:
            converged = True
            break
    return SpibResult(model, train_labels, val_labels, rounds, converged)


# -- profiling ----------------------------------------------------------------------

def _chain_anchors(rng: np.random.Generator, batch: int, n: int, bond: float = 3.8) -> np.ndarray:
    """Random-walk backbone traces with fixed bond length"""
    steps = rng.standard_normal((batch, n, 3))
    steps *= bond / np.linalg.norm(steps, axis=-1, keepdims=True)
    steps[:, 0] = 0.0
    return np.cumsum(steps, axis=1)


def _timed(fn: Callable[[], None], repeats: int, warmup: int) -> Tuple[float, int]:
    """(median seconds per call, peak traced bytes of one call)"""
    for _ in range(warmup):
        fn()
    durations = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        durations.append(time.perf_counter() - start)
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return float(np.median(durations)), int(peak)


def profile(sizes: Sequence[int], windows: Sequence[int], operators: Sequence[GraphOperatorKind],
            batch: int = PROFILE_BATCH, base: Optional[ModelConfig] = None, repeats: int = 5, warmup: int = 2,
            seed: int = 0) -> List[ProfileRow]:
    """
    Time one forward/backward step of the fragment encoder on random tokens for
    every (N, w, operator) combination
    """
    if repeats < 5:
        raise ConfigError(f"profiling needs at least 5 timed steps, got {repeats}")
    base = base or ModelConfig(hidden_dim=32, n_heads=4, n_layers=3)
    rows = []
    for n in sizes:
        for window in windows:
            for operator in operators:
                config = base.model_copy(update={"window": window, "operator": GraphOperatorKind(operator)})
                rng = np.random.default_rng(seed)
                encoder = FragmentEncoder(config, rng)
                encoder.index_dropout_sites()
                frames = FrameBatch(rng.standard_normal((batch, n, config.hidden_dim)), _chain_anchors(rng, batch, n))

                def step():
                    encoder.zero_grad()
                    with dropout_context(seed, 0):
                        pooled = encoder(frames)
                    (pooled * pooled).sum().backward()

                seconds, peak = _timed(step, repeats, warmup)
                m = fragment_count(n, window)
                row = ProfileRow(n_residues=n, window=window, operator=config.operator, ms_per_step=1e3 * seconds,
                                 peak_bytes=peak, pair_count=m * m, batch=batch)
                rows.append(row)
                logger.info("N=%d w=%d %s: %.2f ms/step, peak %d bytes, %d scores per head and layer",
                            n, window, config.operator.value, row.ms_per_step, peak, row.pair_evaluations)
    return rows


def write_profile(path: Path, rows: Sequence[ProfileRow]) -> None:
    storage.write_csv(path, ("N", "w", "operator", "ms_per_step", "peak_bytes", "pair_count"),
                      ((r.n_residues, r.window, r.operator, r.ms_per_step, r.peak_bytes, r.pair_count) for r in rows))


def attention_peak_bytes(m: int, head_dim: int = 16, block: int = 64, mode: str = "blockwise",
                         backward: bool = False, seed: int = 0) -> int:
    """Peak bytes traced while one attention call (and optionally its backward) runs"""
    rng = np.random.default_rng(seed)
    q, k, v = (tc.Tensor(rng.standard_normal((m, head_dim)), requires_grad=backward) for _ in range(3))
    tracemalloc.start()
    try:
        out = attention_blockwise(q, k, v, block) if mode == "blockwise" else attention_naive(q, k, v)
        if backward:
            out.sum().backward()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return int(peak)


def scaling_exponent(sizes: Sequence[float], values: Sequence[float]) -> float:
    """Slope of log(values) against log(sizes)"""
    slope, _ = np.polyfit(np.log(np.asarray(sizes, dtype=np.float64)), np.log(np.asarray(values, dtype=np.float64)), 1)
    return float(slope)

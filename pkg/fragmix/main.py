"""
Command-line driver: gen, featurize, train, profile, msm, attn and oracle.
"""
import argparse
import logging
import os
from pathlib import Path
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from . import storage, synth
from . import tensor_core as tc
from .config import configure_logging, get_settings
from .encoder import FragmentEncoder
from .errors import ConfigError, FragmixError, InputError, UnsupportedCombinationError, UsageError
from .geometry import Topology, TokenCache
from .models import DatasetManifest, GraphOperatorKind, RunConfig
from .msm import MarkovStateModel
from .objectives import VampModel, assign_states, kmeans
from .pipeline import (PROFILE_BATCH, TrajectoryDataset, VampObjective, build_spib_model, build_vamp_model,
                       embed, profile, split, train, train_spib, write_profile, write_scores)

logger = logging.getLogger("fragmix.cli")

OBJECTIVES = {"vamp": 0, "spib": 1}
# run-config keys FRAGMIX_SEED replaces
SEED_KEYS = ("seed", "split_seed", "feature_seed")
ATTENTION_HEADER = ("layer", "head", "query_fragment", "key_fragment", "mean_log_weight")


# -- argument types -------------------------------------------------------------------

def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got '{text}'")
    return values


def operator_list(text: str) -> List[GraphOperatorKind]:
    try:
        return [GraphOperatorKind(v.strip().lower()) for v in text.split(",") if v.strip()]
    except ValueError:
        choices = ",".join(k.value for k in GraphOperatorKind)
        raise argparse.ArgumentTypeError(f"operators must come from {choices}, got '{text}'") from None


def key_value(text: str) -> tuple:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got '{text}'")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _seed(requested: int) -> int:
    """FRAGMIX_SEED wins over any seed given on the command line or in a config"""
    override = get_settings().seed
    return requested if override is None else override


def _load_run_config(path: Optional[Path], overrides: Sequence[tuple]) -> RunConfig:
    run = RunConfig.parse(Path(path).read_text()) if path else RunConfig()
    pairs: Dict[str, str] = dict(overrides)
    override = get_settings().seed
    if override is not None:
        pairs.update({key: str(override) for key in SEED_KEYS})
    return run.with_overrides(**pairs) if pairs else run


def _make_system(name: str, params: Sequence[tuple]):
    try:
        return synth.make_system(name, **dict(params))
    except ValidationError as err:
        problems = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in err.errors())
        raise ConfigError(f"invalid {name} parameters: {problems}") from None


def _relative(path: Path, start: Path) -> str:
    return os.path.relpath(path, start)


def _output(path: str) -> Path:
    """Relative output paths live under FRAGMIX_WORK_DIR"""
    return Path(get_settings().work_dir) / path


def _read_positions(path: Path):
    if path.suffix.lower() == ".csv":
        return storage.read_positions_csv(path)
    return storage.read_positions(path)


# -- commands ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    system = _make_system(args.system, args.param)
    seed = _seed(args.seed)
    trajectories = synth.generate(system, args.frames, args.trajs, seed)
    path = synth.write_dataset(_output(args.out), system, trajectories, seed)
    print(path)
    return 0


def cmd_featurize(args) -> int:
    source = Path(args.input)
    out = _output(args.out)
    manifest = storage.read_manifest(source)
    cache = TokenCache(out)
    entries = []
    for entry in manifest.trajectories:
        entry = entry.model_copy()
        if entry.positions is not None:
            positions, residue_index, anchor, ligand_mask = _read_positions(source.parent / entry.positions)
            topology = Topology(residue_index, anchor, ligand_mask)
            tokens = cache.get(entry.name, positions, topology, args.hidden, _seed(args.feature_seed))
            entry.tokens = _relative(cache.path_for(entry.name), out)
            entry.positions = _relative(source.parent / entry.positions, out)
            entry.n_frames = len(tokens)
        elif entry.tokens is not None:
            raise InputError(f"trajectory {entry.name} already carries tokens and no positions; train on it directly")
        else:
            raise InputError(f"trajectory {entry.name} lists neither positions nor tokens")
        if entry.coordinates is not None:
            entry.coordinates = _relative(source.parent / entry.coordinates, out)
        entries.append(entry)
    featurized = DatasetManifest(system=manifest.system, frame_interval=manifest.frame_interval, seed=manifest.seed,
                                 hidden_dim=args.hidden, trajectories=entries)
    storage.write_manifest(out / "manifest.json", featurized)
    print(out / "manifest.json")
    return 0


def _per_trajectory(values: np.ndarray, lengths: Sequence[int]) -> List[np.ndarray]:
    return np.split(values, np.cumsum(lengths)[:-1])


def cmd_train(args) -> int:
    if args.states < 0:
        raise UsageError(f"--states must be >= 0, got {args.states}")
    run = _load_run_config(args.config, args.set)
    dataset = TrajectoryDataset.load(Path(args.data), run.training.stride)
    train_data, val_data = split(dataset, run.split)
    out = _output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_in = dataset.hidden_dim
    seed = run.training.seed

    if args.objective == "vamp":
        model = build_vamp_model(run.network, n_in, seed)
        result = train(model, VampObjective(run.training.vamp_eps), (train_data, val_data), run.training)
        best, n_states = result.best_score, 0
        write_scores(out / "scores.csv", result)
        outputs = embed(model, dataset, run.training.batch_size)
        rows = ((t, f, *row) for t, traj in enumerate(_per_trajectory(outputs, dataset.lengths))
                for f, row in enumerate(traj))
        storage.write_csv(out / "projections.csv",
                          ["trajectory", "frame"] + [f"c{i}" for i in range(outputs.shape[1])], rows)
        if args.states:
            labels = kmeans(outputs, args.states, seed).assignments
            storage.write_labels(out / "labels.csv", _per_trajectory(labels, dataset.lengths))
    else:
        init_points = None
        if args.init_checkpoint:
            _, vamp = _load_model(Path(args.init_checkpoint))
            if not isinstance(vamp, VampModel):
                raise UsageError(f"{args.init_checkpoint} is not a VAMP checkpoint")
            init_points = (embed(vamp, train_data, run.training.batch_size), embed(vamp, val_data, run.training.batch_size))
        spib = train_spib(run, train_data, val_data, init_points=init_points, seed=seed)
        model, best, n_states = spib.model, spib.best_score, spib.n_states
        for i, rnd in enumerate(spib.rounds):
            write_scores(out / f"scores_round{i + 1}.csv", rnd)
        labels = assign_states(model, embed(model.encoder, dataset, run.training.batch_size))
        storage.write_labels(out / "labels.csv", _per_trajectory(labels, dataset.lengths))

    meta = {"objective": OBJECTIVES[args.objective], "n_in": n_in, "n_states": n_states, "best_val": best}
    storage.write_checkpoint(out / "model.ckpt", run.dump(), model.state_dict(), meta)
    print(f"best_val={best:.6f}")
    return 0


def cmd_profile(args) -> int:
    run = _load_run_config(args.config, args.set)
    rows = profile(args.sizes, args.windows, args.ops, batch=args.batch, base=run.network,
                   repeats=args.repeats, warmup=args.warmup, seed=run.training.seed)
    write_profile(_output(args.out), rows)
    print(args.out)
    return 0


def cmd_msm(args) -> int:
    labels = storage.read_labels(Path(args.labels))
    model = MarkovStateModel.estimate(labels, args.lag, args.states)
    descriptors = None
    if args.data:
        descriptors = TrajectoryDataset.load(Path(args.data)).coordinates()
        if descriptors is None:
            raise InputError(f"{args.data} carries no collective coordinates")
        if len(descriptors) != sum(len(t) for t in labels):
            raise InputError("labels and dataset disagree on the number of frames")
    out = _output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lag_ns = args.lag * args.frame_time
    model.write(out, labels, args.frame_time, args.threshold, descriptors)
    timescales = model.timescales(args.frame_time)
    storage.write_csv(out / "timescales.csv", ("rank", "eigenvalue", "timescale"),
                      ((i + 1, float(np.exp(-lag_ns / t)), t) for i, t in enumerate(timescales)))
    for i, t in enumerate(timescales[:3]):
        print(f"t{i + 1}={t:.6g}")
    return 0


def _load_model(path: Path):
    config_text, params, meta = storage.read_checkpoint(path)
    run = RunConfig.parse(config_text)
    n_in = int(meta["n_in"][0])
    if int(meta["objective"][0]) == OBJECTIVES["spib"]:
        model = build_spib_model(run, n_in, int(meta["n_states"][0]), run.training.seed)
    else:
        model = build_vamp_model(run.network, n_in, run.training.seed)
    model.load_state_dict(params)
    return run, model


def cmd_attn(args) -> int:
    if args.state < 0:
        raise UsageError(f"--state must be >= 0, got {args.state}")
    run, model = _load_model(Path(args.checkpoint))
    encoder = model.encoder
    if not isinstance(encoder, FragmentEncoder):
        raise UnsupportedCombinationError(f"attention maps need the token-mixer encoder, not '{run.network.encoder}'")
    encoder.mixer.params.set_attention_mode("naive")
    model.eval()
    dataset = TrajectoryDataset.load(Path(args.data), run.training.stride)
    layers: List[List[np.ndarray]] = []
    with tc.no_grad():
        for start in range(0, dataset.n_frames, args.batch):
            _, maps = encoder.embed(dataset.frames(np.arange(start, min(start + args.batch, dataset.n_frames))),
                                    capture_attention=True)
            if not layers:
                layers = [[] for _ in range(maps.n_layers)]
            for i, weights in enumerate(maps.layers):
                layers[i].append(weights)
    if not layers:
        raise InputError("the token mixer has no layers to export")
    maps.layers = [np.concatenate(chunks) for chunks in layers]

    select = None
    if args.labels:
        labels = np.concatenate(storage.read_labels(Path(args.labels)))
        if len(labels) != dataset.n_frames:
            raise InputError("labels and dataset disagree on the number of frames")
        select = labels == args.state
        if not select.any():
            raise InputError(f"no frame is labelled with state {args.state}")
    storage.write_csv(_output(args.out), ATTENTION_HEADER, maps.rows(select))
    print(args.out)
    return 0


def cmd_oracle(args) -> int:
    system = _make_system(args.system, args.param)
    timescales = synth.oracle_timescales(system, args.lag, args.bins, args.count, args.steps, _seed(args.seed))
    synth.write_oracle(_output(args.out), timescales, args.lag)
    for i, t in enumerate(timescales[:3]):
        print(f"t{i + 1}={t:.6g}")
    return 0


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="fragmix", description="Hierarchical token mixing for molecular dynamics",
                                     formatter_class=formatter)
    parser.add_argument("--log-level", default=None, help="Logging level (defaults to FRAGMIX_LOG_LEVEL)")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="Generate synthetic trajectories", formatter_class=formatter)
    gen.add_argument("--system", choices=sorted(synth.SYSTEMS), required=True)
    gen.add_argument("--frames", type=positive_int, required=True, help="Stored frames per trajectory")
    gen.add_argument("--trajs", type=positive_int, default=1, help="Number of independent trajectories")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--param", type=key_value, action="append", default=[], help="System parameter key=value")
    gen.set_defaults(handler=cmd_gen)

    feat = commands.add_parser("featurize", help="Compute residue tokens for a dataset", formatter_class=formatter)
    feat.add_argument("--in", dest="input", required=True, help="Manifest of the position dataset")
    feat.add_argument("--out", required=True, help="Output directory for tokens and the new manifest")
    feat.add_argument("--hidden", type=positive_int, default=64, help="Token width H")
    feat.add_argument("--feature-seed", type=int, default=0, help="Seed of the descriptor projection")
    feat.set_defaults(handler=cmd_featurize)

    tr = commands.add_parser("train", help="Train a VAMP or SPIB model", formatter_class=formatter)
    tr.add_argument("--objective", choices=sorted(OBJECTIVES), default="vamp")
    tr.add_argument("--data", required=True, help="Manifest of a featurized dataset")
    tr.add_argument("--config", default=None, help="key=value run configuration file")
    tr.add_argument("--set", type=key_value, action="append", default=[], help="Configuration override key=value")
    tr.add_argument("--out", default="run", help="Output directory")
    tr.add_argument("--states", type=int, default=0, help="Cluster VAMP outputs into this many states (0: skip)")
    tr.add_argument("--init-checkpoint", default=None,
                    help="VAMP checkpoint whose outputs seed the SPIB k-means labels (default: encoder features)")
    tr.set_defaults(handler=cmd_train)

    prof = commands.add_parser("profile", help="Time the encoder over system sizes and windows",
                               formatter_class=formatter)
    prof.add_argument("--sizes", type=int_list, default=[128, 214, 592], help="Residue counts N")
    prof.add_argument("--windows", type=int_list, default=[1, 2, 4, 6], help="Window sizes w")
    prof.add_argument("--ops", type=operator_list, default=[GraphOperatorKind.RGGC], help="Graph operators")
    prof.add_argument("--batch", type=positive_int, default=PROFILE_BATCH, help="Frames per timed step")
    prof.add_argument("--repeats", type=positive_int, default=5, help="Timed steps per configuration")
    prof.add_argument("--warmup", type=int, default=2)
    prof.add_argument("--config", default=None, help="key=value run configuration file")
    prof.add_argument("--set", type=key_value, action="append", default=[], help="Configuration override key=value")
    prof.add_argument("--out", default="profile.csv")
    prof.set_defaults(handler=cmd_profile)

    msm = commands.add_parser("msm", help="Build a Markov state model from state labels", formatter_class=formatter)
    msm.add_argument("--labels", required=True, help="CSV of trajectory,frame,state")
    msm.add_argument("--lag", type=positive_int, required=True, help="Lag in frames")
    msm.add_argument("--states", type=positive_int, default=None, help="Number of states (default: max label + 1)")
    msm.add_argument("--frame-time", type=float, default=1.0, help="Time (ns) between frames")
    msm.add_argument("--threshold", type=positive_int, default=1, help="Minimum count of an emitted edge")
    msm.add_argument("--data", default=None, help="Manifest whose coordinates become per-state means")
    msm.add_argument("--out", default="msm")
    msm.set_defaults(handler=cmd_msm)

    attn = commands.add_parser("attn", help="Export mean log-attention maps", formatter_class=formatter)
    attn.add_argument("--checkpoint", required=True)
    attn.add_argument("--data", required=True, help="Manifest of a featurized dataset")
    attn.add_argument("--out", default="attention.csv")
    attn.add_argument("--labels", default=None, help="Restrict the average to frames of --state")
    attn.add_argument("--state", type=int, default=0)
    attn.add_argument("--batch", type=positive_int, default=64)
    attn.set_defaults(handler=cmd_attn)

    oracle = commands.add_parser("oracle", help="Reference implied timescales of a synthetic system",
                                 formatter_class=formatter)
    oracle.add_argument("--system", choices=sorted(synth.SYSTEMS), required=True)
    oracle.add_argument("--lag", type=float, required=True, help="Lag time in system time units")
    oracle.add_argument("--bins", type=positive_int, default=200)
    oracle.add_argument("--count", type=positive_int, default=5, help="Timescales to report")
    oracle.add_argument("--steps", type=positive_int, default=1_000_000, help="Integration steps for the polymer")
    oracle.add_argument("--seed", type=int, default=0)
    oracle.add_argument("--param", type=key_value, action="append", default=[], help="System parameter key=value")
    oracle.add_argument("--out", default="oracle.csv")
    oracle.set_defaults(handler=cmd_oracle)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except FragmixError as err:
        logger.error("%s failed: %s", args.command, err.message)
        print(f"error: {err.message}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        logger.error("%s failed: %s", args.command, err)
        print(f"error: {err}", file=sys.stderr)
        return 1

"""
Binary and text file formats.

All binary formats are little-endian: u32 counts and f64 payloads.
Readers raise FormatError with the byte offset at which parsing failed.
"""
from __future__ import annotations

import csv
import io
import logging
import os
from pathlib import Path
import struct
import tempfile
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError
from .models import DatasetManifest

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TOKEN_MAGIC = b"G2VTOK1\0"
POSITION_MAGIC = b"G2VPOS1\0"
CHECKPOINT_MAGIC = b"FMX1"
META_PREFIX = "__meta__."


def atomic_write(path: PathLike, payload: bytes) -> None:
    """Write to a temporary sibling and rename, so readers never see a partial file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    """Cursor over a byte buffer that reports offsets on failure"""

    def __init__(self, payload: bytes, path: PathLike):
        self.payload = payload
        self.offset = 0
        self.path = str(path)

    def fail(self, message: str) -> FormatError:
        return FormatError(message, offset=self.offset, path=self.path)

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.payload):
            raise self.fail(f"truncated file while reading {what} ({n} bytes needed, {len(self.payload) - self.offset} left)")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def magic(self, expected: bytes) -> None:
        start = self.offset
        got = self.take(len(expected), "magic")
        if got != expected:
            self.offset = start
            raise self.fail(f"bad magic {got!r}, expected {expected!r}")

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, what), dtype=dtype).copy()

    def text(self, n: int, what: str) -> str:
        start = self.offset
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            self.offset = start
            raise self.fail(f"{what} is not valid UTF-8") from None

    def finish(self) -> None:
        if self.offset != len(self.payload):
            raise self.fail(f"{len(self.payload) - self.offset} trailing bytes")


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as err:
        raise FormatError(f"cannot read file: {err.strerror}", path=str(path)) from None


# -- token cache ------------------------------------------------------------

def encode_tokens(tokens: np.ndarray) -> bytes:
    n_frames, n_res, hidden = tokens.shape
    return (TOKEN_MAGIC + struct.pack("<III", n_res, hidden, n_frames)
            + np.ascontiguousarray(tokens, dtype="<f8").tobytes())


def write_tokens(path: PathLike, tokens: np.ndarray) -> None:
    atomic_write(path, encode_tokens(np.asarray(tokens)))


def read_token_header(path: PathLike) -> Tuple[int, int, int]:
    """(N, H, frame count) without loading the payload"""
    with open(path, "rb") as handle:
        reader = _Reader(handle.read(len(TOKEN_MAGIC) + 12), path)
    reader.magic(TOKEN_MAGIC)
    return reader.u32("N"), reader.u32("H"), reader.u32("frame count")


def read_tokens(path: PathLike) -> np.ndarray:
    reader = _Reader(_read_bytes(path), path)
    reader.magic(TOKEN_MAGIC)
    n_res, hidden, n_frames = reader.u32("N"), reader.u32("H"), reader.u32("frame count")
    tokens = reader.array("<f8", n_frames * n_res * hidden, "tokens").reshape(n_frames, n_res, hidden)
    reader.finish()
    return tokens.astype(np.float64)


# -- positions ----------------------------------------------------------------

def encode_positions(positions: np.ndarray, residue_index: np.ndarray, anchor: np.ndarray,
                     ligand_mask: np.ndarray) -> bytes:
    n_frames, n_atoms, _ = positions.shape
    return b"".join([
        POSITION_MAGIC,
        struct.pack("<II", n_atoms, n_frames),
        np.asarray(residue_index, dtype="<u4").tobytes(),
        np.asarray(anchor, dtype="<u4").tobytes(),
        np.asarray(ligand_mask, dtype="u1").tobytes(),
        np.ascontiguousarray(positions, dtype="<f8").tobytes(),
    ])


def write_positions(path: PathLike, positions: np.ndarray, residue_index: np.ndarray, anchor: np.ndarray,
                    ligand_mask: np.ndarray) -> None:
    atomic_write(path, encode_positions(positions, residue_index, anchor, ligand_mask))


def read_positions(path: PathLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (positions[L, A, 3], residue_index[A], anchor[N], ligand_mask[N])"""
    reader = _Reader(_read_bytes(path), path)
    reader.magic(POSITION_MAGIC)
    n_atoms, n_frames = reader.u32("atom count"), reader.u32("frame count")
    if n_atoms == 0:
        raise reader.fail("atom count is zero")
    table_start = reader.offset
    residue_index = reader.array("<u4", n_atoms, "residue id table").astype(np.int64)
    n_res = int(residue_index.max()) + 1
    if len(np.unique(residue_index)) != n_res:
        reader.offset = table_start
        raise reader.fail("residue ids are not contiguous from 0")
    anchor = reader.array("<u4", n_res, "anchor table").astype(np.int64)
    if np.any(anchor >= n_atoms) or np.any(residue_index[np.minimum(anchor, n_atoms - 1)] != np.arange(n_res)):
        raise reader.fail("anchor table points outside its residue")
    ligand_mask = reader.array("u1", n_res, "ligand mask").astype(bool)
    positions = reader.array("<f8", n_frames * n_atoms * 3, "frames").reshape(n_frames, n_atoms, 3)
    reader.finish()
    return positions.astype(np.float64), residue_index, anchor, ligand_mask


def read_positions_csv(path: PathLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Import positions from CSV rows ``frame, atom, x, y, z, residue, is_anchor, is_ligand``
    """
    payload = _read_bytes(path)
    rows: List[Tuple[int, int, float, float, float, int, int, int]] = []
    offset = 0
    for lineno, line in enumerate(payload.decode("utf-8", errors="replace").splitlines(keepends=True)):
        stripped = line.strip()
        if stripped and not (lineno == 0 and stripped.lower().startswith("frame")):
            fields = [f.strip() for f in stripped.split(",")]
            try:
                if len(fields) != 8:
                    raise ValueError
                rows.append((int(fields[0]), int(fields[1]), float(fields[2]), float(fields[3]), float(fields[4]),
                             int(fields[5]), int(fields[6]), int(fields[7])))
            except ValueError:
                raise FormatError(f"line {lineno + 1}: expected 8 numeric fields", offset=offset, path=str(path)) from None
        offset += len(line.encode("utf-8"))
    if not rows:
        raise FormatError("no position rows", offset=0, path=str(path))

    table = np.array(rows, dtype=np.float64)
    frames = np.unique(table[:, 0].astype(np.int64))
    atoms = np.unique(table[:, 1].astype(np.int64))
    if len(table) != len(frames) * len(atoms):
        raise FormatError("every frame must list every atom exactly once", path=str(path))
    order = np.lexsort((table[:, 1], table[:, 0]))
    table = table[order]
    positions = table[:, 2:5].reshape(len(frames), len(atoms), 3)
    first = table[:len(atoms)]
    residue_index = first[:, 5].astype(np.int64)
    n_res = int(residue_index.max()) + 1
    anchor = np.full(n_res, -1, dtype=np.int64)
    ligand_mask = np.zeros(n_res, dtype=bool)
    for atom, (res, is_anchor, is_ligand) in enumerate(first[:, 5:8].astype(np.int64)):
        if is_anchor:
            if anchor[res] >= 0:
                raise FormatError(f"residue {res} has more than one anchor", path=str(path))
            anchor[res] = atom
        ligand_mask[res] |= bool(is_ligand)
    if np.any(anchor < 0):
        raise FormatError(f"residues without anchor: {np.flatnonzero(anchor < 0).tolist()}", path=str(path))
    return positions, residue_index, anchor, ligand_mask


# -- checkpoints ----------------------------------------------------------------

def encode_checkpoint(config_text: str, params: Dict[str, np.ndarray]) -> bytes:
    config = config_text.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(config)), config, struct.pack("<I", len(params))]
    for name, value in params.items():
        value = np.asarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value).tobytes())
    return b"".join(parts)


def write_checkpoint(path: PathLike, config_text: str, params: Dict[str, np.ndarray],
                     meta: Dict[str, np.ndarray] = None) -> None:
    blobs = dict(params)
    for key, value in (meta or {}).items():
        blobs[META_PREFIX + key] = np.atleast_1d(np.asarray(value, dtype=np.float64))
    atomic_write(path, encode_checkpoint(config_text, blobs))
    logger.debug("checkpoint %s: %d blobs", path, len(blobs))


def read_checkpoint(path: PathLike) -> Tuple[str, Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Returns (config text, parameters, metadata blobs)"""
    reader = _Reader(_read_bytes(path), path)
    reader.magic(CHECKPOINT_MAGIC)
    config_text = reader.text(reader.u32("config length"), "config")
    params: Dict[str, np.ndarray] = {}
    meta: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32("parameter count")):
        name = reader.text(reader.u32("name length"), "parameter name")
        ndim = reader.u32(f"rank of {name}")
        shape = tuple(reader.u32(f"extent of {name}") for _ in range(ndim))
        value = reader.array("<f8", int(np.prod(shape, dtype=np.int64)), name).reshape(shape).astype(np.float64)
        if name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = value
        else:
            params[name] = value
    reader.finish()
    return config_text, params, meta


# -- manifests --------------------------------------------------------------------

def write_manifest(path: PathLike, manifest: DatasetManifest) -> None:
    atomic_write(path, (manifest.model_dump_json(indent=2) + "\n").encode("utf-8"))


def read_manifest(path: PathLike) -> DatasetManifest:
    try:
        return DatasetManifest.model_validate_json(_read_bytes(path))
    except ValueError as err:
        raise FormatError(f"invalid manifest: {err}", path=str(path)) from None


# -- CSV ----------------------------------------------------------------------------

def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value.value if hasattr(value, "value") else value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buffer.getvalue()


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write(path, csv_text(header, rows).encode("utf-8"))


def read_labels(path: PathLike) -> List[np.ndarray]:
    """
    Per-trajectory state labels from CSV rows ``trajectory, frame, state``
    """
    payload = _read_bytes(path).decode("utf-8", errors="replace")
    per_traj: Dict[int, List[Tuple[int, int]]] = {}
    offset = 0
    for lineno, line in enumerate(payload.splitlines(keepends=True)):
        stripped = line.strip()
        if stripped and not (lineno == 0 and stripped.lower().startswith("trajectory")):
            try:
                traj, frame, state = (int(f) for f in stripped.split(","))
                if state < 0:
                    raise ValueError
            except ValueError:
                raise FormatError(f"line {lineno + 1}: expected 'trajectory,frame,state' with a non-negative state",
                                  offset=offset, path=str(path)) from None
            per_traj.setdefault(traj, []).append((frame, state))
        offset += len(line.encode("utf-8"))
    labels = []
    for traj in sorted(per_traj):
        pairs = sorted(per_traj[traj])
        labels.append(np.array([s for _, s in pairs], dtype=np.int64))
    return labels


def write_labels(path: PathLike, labels: Sequence[np.ndarray]) -> None:
    rows = ((t, f, int(s)) for t, traj in enumerate(labels) for f, s in enumerate(traj))
    write_csv(path, ("trajectory", "frame", "state"), rows)


def read_coordinates(path: PathLike) -> np.ndarray:
    """Collective-coordinate CSV written by the generators: frame, c0[, c1, ...]"""
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as err:
        raise FormatError(f"invalid coordinate file: {err}", path=str(path)) from None
    return table[:, 1:]


def write_coordinates(path: PathLike, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64).reshape(len(values), -1)
    header = ["frame"] + [f"c{i}" for i in range(values.shape[1])]
    write_csv(path, header, ([f, *row] for f, row in enumerate(values)))

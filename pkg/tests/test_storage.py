import numpy as np
import pytest

from fragmix import storage
from fragmix.errors import FormatError
from fragmix.models import DatasetManifest, TrajectoryEntry


def test_tokens_round_trip(tmp_path, rng):
    tokens = rng.standard_normal((3, 5, 4))
    storage.write_tokens(tmp_path / "t.tok", tokens)
    np.testing.assert_array_equal(storage.read_tokens(tmp_path / "t.tok"), tokens)
    assert storage.read_token_header(tmp_path / "t.tok") == (5, 4, 3)


def test_bad_magic_reports_offset_zero(tmp_path):
    (tmp_path / "t.tok").write_bytes(b"NOTATOKENFILE" + bytes(20))
    with pytest.raises(FormatError) as exc:
        storage.read_tokens(tmp_path / "t.tok")
    assert exc.value.offset == 0


def test_truncated_tokens_report_payload_offset(tmp_path, rng):
    payload = storage.encode_tokens(rng.standard_normal((2, 3, 4)))
    (tmp_path / "t.tok").write_bytes(payload[:-8])
    with pytest.raises(FormatError) as exc:
        storage.read_tokens(tmp_path / "t.tok")
    assert exc.value.offset == len(storage.TOKEN_MAGIC) + 12
    assert "truncated" in exc.value.message


def test_trailing_bytes(tmp_path, rng):
    payload = storage.encode_tokens(rng.standard_normal((1, 2, 2)))
    (tmp_path / "t.tok").write_bytes(payload + b"\0")
    with pytest.raises(FormatError) as exc:
        storage.read_tokens(tmp_path / "t.tok")
    assert exc.value.offset == len(payload)


def test_positions_round_trip(tmp_path, rng):
    positions = rng.standard_normal((4, 5, 3))
    residue_index = np.array([0, 0, 1, 2, 2])
    anchor = np.array([1, 2, 3])
    ligand = np.array([False, False, True])
    storage.write_positions(tmp_path / "p.pos", positions, residue_index, anchor, ligand)
    got = storage.read_positions(tmp_path / "p.pos")
    for a, b in zip(got, (positions, residue_index, anchor, ligand)):
        np.testing.assert_array_equal(a, b)


def test_anchor_outside_residue(tmp_path, rng):
    storage.write_positions(tmp_path / "p.pos", rng.standard_normal((1, 3, 3)), np.array([0, 1, 1]),
                            np.array([1, 2]), np.zeros(2, dtype=bool))
    with pytest.raises(FormatError, match="anchor"):
        storage.read_positions(tmp_path / "p.pos")


def test_positions_from_csv(tmp_path):
    rows = ["frame,atom,x,y,z,residue,is_anchor,is_ligand"]
    for frame in range(2):
        rows += [f"{frame},0,{frame},0,0,0,1,0", f"{frame},1,0,{frame},0,0,0,0", f"{frame},2,0,0,{frame},1,1,1"]
    (tmp_path / "p.csv").write_text("\n".join(rows) + "\n")
    positions, residue_index, anchor, ligand = storage.read_positions_csv(tmp_path / "p.csv")
    assert positions.shape == (2, 3, 3)
    np.testing.assert_array_equal(positions[1], np.eye(3))
    np.testing.assert_array_equal(residue_index, [0, 0, 1])
    np.testing.assert_array_equal(anchor, [0, 2])
    np.testing.assert_array_equal(ligand, [False, True])


def test_csv_row_error_reports_offset(tmp_path):
    text = "frame,atom,x,y,z,residue,is_anchor,is_ligand\n0,0,1,2,3,0,1,0\n0,1,oops\n"
    (tmp_path / "p.csv").write_text(text)
    with pytest.raises(FormatError) as exc:
        storage.read_positions_csv(tmp_path / "p.csv")
    assert exc.value.offset == text.index("0,1,oops")


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"encoder.weight": rng.standard_normal((3, 2)), "head.bias": rng.standard_normal(2)}
    storage.write_checkpoint(tmp_path / "m.ckpt", "hidden_dim=8\n", params, {"best_val": 1.5})
    config, got, meta = storage.read_checkpoint(tmp_path / "m.ckpt")
    assert config == "hidden_dim=8\n"
    assert set(got) == set(params)
    for name in params:
        np.testing.assert_array_equal(got[name], params[name])
    assert meta["best_val"][0] == 1.5


def test_truncated_checkpoint(tmp_path):
    payload = storage.encode_checkpoint("a=1\n", {"w": np.ones(4)})
    (tmp_path / "m.ckpt").write_bytes(payload[:20])
    with pytest.raises(FormatError, match="truncated"):
        storage.read_checkpoint(tmp_path / "m.ckpt")


def test_labels(tmp_path):
    storage.write_labels(tmp_path / "l.csv", [np.array([0, 1, 1]), np.array([2])])
    got = storage.read_labels(tmp_path / "l.csv")
    assert [t.tolist() for t in got] == [[0, 1, 1], [2]]


def test_labels_reject_negative_state(tmp_path):
    text = "trajectory,frame,state\n0,0,1\n0,1,-1\n"
    (tmp_path / "l.csv").write_text(text)
    with pytest.raises(FormatError) as exc:
        storage.read_labels(tmp_path / "l.csv")
    assert exc.value.offset == text.index("0,1,-1")


def test_manifest(tmp_path):
    manifest = DatasetManifest(system="ou", frame_interval=0.1,
                               trajectories=[TrajectoryEntry(name="a", n_frames=3, positions="a.pos")])
    storage.write_manifest(tmp_path / "manifest.json", manifest)
    assert storage.read_manifest(tmp_path / "manifest.json") == manifest
    (tmp_path / "bad.json").write_text('{"system": "ou", "frame_interval": -1}')
    with pytest.raises(FormatError, match="invalid manifest"):
        storage.read_manifest(tmp_path / "bad.json")


def test_missing_file(tmp_path):
    with pytest.raises(FormatError, match="cannot read"):
        storage.read_tokens(tmp_path / "missing.tok")

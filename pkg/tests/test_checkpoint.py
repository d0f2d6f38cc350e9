from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import tiny_params
from mcmdpo import checkpoint
from mcmdpo.checkpoint import CheckpointError, blob_path
from mcmdpo.model import GROUPS, ModelParams


def _bytes(path):
    return path.read_bytes(), blob_path(path).read_bytes()


def test_save_load_save_is_byte_identical(tmp_path):
    p = tiny_params(4)
    a, b = tmp_path / "a.ckpt.json", tmp_path / "b.ckpt.json"
    checkpoint.save(p, a, {"stage": "sft"})
    loaded = checkpoint.load(a)
    checkpoint.save(loaded, b, {"stage": "sft"})
    assert _bytes(a) == _bytes(b)
    for name in p.arrays:
        assert loaded[name].tobytes() == p[name].tobytes()
    assert loaded.config == p.config


def test_blob_is_little_endian_float64(tmp_path):
    p = tiny_params(4)
    path = tmp_path / "c.json"
    checkpoint.save(p, path)
    blob = blob_path(path).read_bytes()
    total = sum(a.size for a in p.arrays.values())
    assert len(blob) == 8 * total
    manifest = json.loads(path.read_text())
    first = manifest["tensors"][0]
    arr = np.frombuffer(blob[:8 * int(np.prod(first["shape"]))], dtype="<f8")
    np.testing.assert_array_equal(arr, p[first["name"]].reshape(-1))


def test_truncated_blob_names_expected_and_actual(tmp_path):
    p = tiny_params(4)
    path = tmp_path / "t.json"
    checkpoint.save(p, path)
    blob = blob_path(path).read_bytes()
    blob_path(path).write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match=rf"blob length: expected {len(blob)} bytes, got {len(blob) - 8}"):
        checkpoint.load(path)


def test_corrupted_blob_fails_digest(tmp_path):
    p = tiny_params(4)
    path = tmp_path / "d.json"
    checkpoint.save(p, path)
    blob = bytearray(blob_path(path).read_bytes())
    blob[3] ^= 0xFF
    blob_path(path).write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="blob_sha256"):
        checkpoint.load(path)


@pytest.mark.parametrize("mutate,field", [
    (lambda m: m["tensors"][0].__setitem__("shape", [1, 1]), "shape"),
    (lambda m: m["tensors"][0].__setitem__("group", "lm_head"), "group"),
    (lambda m: m["tensors"].pop(), "tensors"),
    (lambda m: m.__setitem__("format", "other"), "format"),
])
def test_manifest_mismatch_names_field(tmp_path, mutate, field):
    p = tiny_params(4)
    path = tmp_path / "m.json"
    checkpoint.save(p, path)
    manifest = json.loads(path.read_text())
    mutate(manifest)
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match=field):
        checkpoint.load(path)


def test_missing_files(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "nope.json")
    p = tiny_params(0)
    path = tmp_path / "x.json"
    checkpoint.save(p, path)
    blob_path(path).unlink()
    with pytest.raises(CheckpointError):
        checkpoint.load(path)


def test_meta_round_trip(tmp_path):
    path = tmp_path / "meta.json"
    checkpoint.save(tiny_params(0), path, {"vocab": ["<pad>", "a"], "stage": "pref"})
    assert checkpoint.read_meta(path) == {"vocab": ["<pad>", "a"], "stage": "pref"}


def test_cross_paradigm_load_same_architecture(tmp_path):
    """Paradigm masks are runtime state: a checkpoint from any run loads for any paradigm."""
    from mcmdpo.losses import LossWeights, batch_loss
    from conftest import tiny_item
    from mcmdpo.model import trainable_groups

    path = tmp_path / "p1.json"
    checkpoint.save(tiny_params(1), path, {"paradigm": "P1"})
    loaded = checkpoint.load(path)
    for paradigm in ("P1", "P2", "P3", "P4"):
        bl = batch_loss(loaded, loaded, [tiny_item(0)], LossWeights(), trainable_groups(paradigm, "S2"))
        assert np.isfinite(bl.loss)


def test_group_digest_tracks_group_bytes():
    p = tiny_params(0)
    q = p.with_arrays({"lm_head.bias": p["lm_head.bias"] + 1.0})
    for g in GROUPS:
        same = checkpoint.group_digest(p, g) == checkpoint.group_digest(q, g)
        assert same == (g != "lm_head")


def test_params_with_wrong_shapes_rejected():
    p = tiny_params(0)
    arrays = dict(p.arrays)
    arrays["lm_head.bias"] = np.zeros(3)
    with pytest.raises(ValueError):
        ModelParams(p.config, arrays)

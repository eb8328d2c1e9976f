import json
import struct

import numpy as np
import pytest

from mdrg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def _sample_tensors(rng):
    return {
        "b/second": rng.random((3, 4)).astype(np.float32),
        "a/first": rng.random((2,)).astype(np.float32),
        "scalarish": np.float32(rng.random((1,))),
    }


def test_round_trip(tmp_path, rng):
    path = str(tmp_path / "x.mdrg")
    tensors = _sample_tensors(rng)
    save_checkpoint(path, {"k": 1}, tensors)
    config, loaded = load_checkpoint(path)
    assert config == {"k": 1}
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name], tensors[name])


def test_save_is_deterministic_and_canonical(tmp_path, rng):
    tensors = _sample_tensors(rng)
    p1, p2 = str(tmp_path / "a.mdrg"), str(tmp_path / "b.mdrg")
    save_checkpoint(p1, {"k": [1, 2]}, tensors)
    save_checkpoint(p2, {"k": [1, 2]}, dict(reversed(tensors.items())))
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_manifest_sorted_and_header(tmp_path, rng):
    path = str(tmp_path / "x.mdrg")
    save_checkpoint(path, {}, _sample_tensors(rng))
    raw = open(path, "rb").read()
    magic, version, meta_len = struct.unpack_from("<4sIQ", raw)
    assert magic == b"MDRG" and version == 1
    meta = json.loads(raw[16 : 16 + meta_len].decode("utf-8"))
    names = [t["name"] for t in meta["tensors"]]
    assert names == sorted(names)
    assert all(t["dtype"] == "f32" for t in meta["tensors"])
    offsets = [t["offset"] for t in meta["tensors"]]
    assert offsets == sorted(offsets) and offsets[0] == 0


def test_bad_magic_rejected(tmp_path, rng):
    path = str(tmp_path / "x.mdrg")
    save_checkpoint(path, {}, _sample_tensors(rng))
    raw = bytearray(open(path, "rb").read())
    raw[:4] = b"NOPE"
    open(path, "wb").write(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_bad_version_rejected(tmp_path, rng):
    path = str(tmp_path / "x.mdrg")
    save_checkpoint(path, {}, _sample_tensors(rng))
    raw = bytearray(open(path, "rb").read())
    raw[4:8] = struct.pack("<I", 99)
    open(path, "wb").write(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path, rng):
    path = str(tmp_path / "x.mdrg")
    save_checkpoint(path, {}, _sample_tensors(rng))
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[: len(raw) - 8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)

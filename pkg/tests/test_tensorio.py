"""Tensor container format tests."""

import json
import struct

import pytest
import torch

from atgan.errors import CheckpointError
from atgan.tensorio import FORMAT_VERSION, MAGIC, load_tensors, save_tensors


@pytest.fixture
def sample_tensors():
    gen = torch.Generator().manual_seed(0)
    return {
        "a/weight": torch.randn(3, 4, generator=gen),
        "a/bias": torch.randn(4, generator=gen).double(),
        "counts": torch.arange(5, dtype=torch.int64),
        "flags": torch.tensor([True, False, True]),
        "bytes": torch.arange(8, dtype=torch.uint8),
    }


def test_roundtrip_bit_exact(tmp_path, sample_tensors):
    path = str(tmp_path / "t.bin")
    save_tensors(path, sample_tensors, {"note": "x", "nested": {"v": 1.5}})
    meta, loaded = load_tensors(path)
    assert meta == {"note": "x", "nested": {"v": 1.5}}
    assert set(loaded) == set(sample_tensors)
    for name, t in sample_tensors.items():
        assert loaded[name].dtype == t.dtype
        assert torch.equal(loaded[name], t)


def test_save_load_save_identical_bytes(tmp_path, sample_tensors):
    p1, p2 = str(tmp_path / "1.bin"), str(tmp_path / "2.bin")
    save_tensors(p1, sample_tensors, {"step": 7})
    meta, loaded = load_tensors(p1)
    save_tensors(p2, loaded, meta)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMAGIC" + bytes(32))
    with pytest.raises(CheckpointError, match="bad magic at offset 0"):
        load_tensors(str(path))


def test_truncated_manifest(tmp_path):
    path = tmp_path / "trunc.bin"
    path.write_bytes(MAGIC + struct.pack("<Q", 10_000) + b"{}")
    with pytest.raises(CheckpointError, match="truncated manifest"):
        load_tensors(str(path))


def test_truncated_tensor_data(tmp_path, sample_tensors):
    path = tmp_path / "t.bin"
    save_tensors(str(path), sample_tensors, {})
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="truncated tensor data"):
        load_tensors(str(path))


def test_version_mismatch(tmp_path):
    manifest = json.dumps({"format_version": FORMAT_VERSION + 1, "meta": {}, "tensors": []}).encode()
    path = tmp_path / "v.bin"
    path.write_bytes(MAGIC + struct.pack("<Q", len(manifest)) + manifest)
    with pytest.raises(CheckpointError, match="format version"):
        load_tensors(str(path))


def test_deterministic_bytes_across_insertion_order(tmp_path):
    a = {"x": torch.ones(2), "y": torch.zeros(3)}
    b = {"y": torch.zeros(3), "x": torch.ones(2)}
    pa, pb = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    save_tensors(pa, a, {"k": 1})
    save_tensors(pb, b, {"k": 1})
    assert open(pa, "rb").read() == open(pb, "rb").read()

"""Single-file tensor container.

Layout: 8-byte magic, little-endian uint64 manifest length, JSON manifest,
then raw little-endian tensor payloads back to back. The manifest records the
format version, caller metadata, and per-tensor (name, dtype, shape, offset,
nbytes). Serialization is canonical (sorted keys, sorted tensor names), so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"ATGANBIN"
FORMAT_VERSION = 1

_DTYPE_TO_NP = {
    "float32": "<f4",
    "float64": "<f8",
    "float16": "<f2",
    "int64": "<i8",
    "int32": "<i4",
    "int16": "<i2",
    "int8": "|i1",
    "uint8": "|u1",
    "bool": "|b1",
}
_TORCH_TO_NAME = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.int16: "int16",
    torch.int8: "int8",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_NAME_TO_TORCH = {v: k for k, v in _TORCH_TO_NAME.items()}


def save_tensors(path: str, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors plus a JSON-able metadata dict to one file."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        dtype = _TORCH_TO_NAME.get(tensor.dtype)
        if dtype is None:
            raise CheckpointError(f"unsupported tensor dtype {tensor.dtype} for {name!r}")
        blob = np.ascontiguousarray(tensor.numpy()).astype(_DTYPE_TO_NP[dtype], copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": dtype,
            "shape": list(tensor.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": _canonical(meta or {}),
        "tensors": entries,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest_bytes)))
        f.write(manifest_bytes)
        for blob in blobs:
            f.write(blob)


def load_tensors(path: str):
    """Read a container back; returns (meta, {name: tensor})."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header, {len(raw)} bytes")
    (manifest_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + manifest_len > len(raw):
        raise CheckpointError(
            f"{path}: truncated manifest at offset 16: need {manifest_len} bytes"
        )
    try:
        manifest = json.loads(raw[16:16 + manifest_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unparseable manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: container format version {version!r}, expected {FORMAT_VERSION}"
        )
    payload = raw[16 + manifest_len:]
    tensors = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: truncated tensor data for {entry['name']!r} at offset {16 + manifest_len + start}"
            )
        arr = np.frombuffer(payload[start:start + nbytes], dtype=_DTYPE_TO_NP[entry["dtype"]])
        arr = arr.reshape(entry["shape"]).copy()
        if entry["dtype"] == "bool":
            tensor = torch.from_numpy(arr).to(torch.bool)
        else:
            tensor = torch.from_numpy(arr)
        tensors[entry["name"]] = tensor.to(_NAME_TO_TORCH[entry["dtype"]])
    return manifest["meta"], tensors


def _canonical(obj):
    """Round-trip through JSON so tuples/paths normalize before hashing or writing."""
    return json.loads(json.dumps(obj, sort_keys=True, default=str))

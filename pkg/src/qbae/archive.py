"""Flat named-tensor file format used for weights and checkpoints.

Layout, bit-exact:

    [8 bytes]  little-endian unsigned header length N
    [N bytes]  UTF-8 JSON: tensor name -> {"dtype": "F32"|"F16",
               "shape": [...], "data_offsets": [begin, end]}
    [...]      contiguous little-endian raw tensor data

Offsets are relative to the first byte after the header. Tensors are laid
out in sorted-name order and the header JSON is serialized with sorted keys
and compact separators, so writing the same tensors twice produces
byte-identical files. The header may additionally carry a reserved
"__metadata__" key holding a flat string-to-string dict (used to embed a
config block in checkpoints); readers must tolerate and preserve it.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ValidationError

_DTYPE_TO_TAG = {np.dtype("float32"): "F32", np.dtype("float16"): "F16"}
_TAG_TO_DTYPE = {"F32": np.dtype("float32"), "F16": np.dtype("float16")}

METADATA_KEY = "__metadata__"


def save_archive(path, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    """Write `tensors` to `path`. All arrays must be float32 or float16."""
    header: dict = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_TO_TAG:
            raise ValidationError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        header[name] = {
            "dtype": _DTYPE_TO_TAG[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        blobs.append(raw)
        offset += len(raw)
    if metadata is not None:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read an archive. Returns (tensors, metadata)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ValidationError(f"{path}: truncated header length")
        (n,) = struct.unpack("<Q", head)
        header_bytes = fh.read(n)
        if len(header_bytes) != n:
            raise ValidationError(f"{path}: truncated header")
        header = json.loads(header_bytes.decode("utf-8"))
        data = fh.read()

    metadata = header.pop(METADATA_KEY, {})
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        tag = entry["dtype"]
        if tag not in _TAG_TO_DTYPE:
            raise ValidationError(f"{path}: tensor '{name}' has unknown dtype tag {tag!r}")
        begin, end = entry["data_offsets"]
        raw = data[begin:end]
        if len(raw) != end - begin:
            raise ValidationError(f"{path}: tensor '{name}' data out of bounds")
        arr = np.frombuffer(raw, dtype=_TAG_TO_DTYPE[tag].newbyteorder("<")).astype(_TAG_TO_DTYPE[tag])
        tensors[name] = arr.reshape(entry["shape"])
    return tensors, dict(metadata)


def tensor_bytes(arr: np.ndarray) -> bytes:
    """Raw little-endian bytes of an array, as stored in an archive."""
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<")).tobytes()


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over a byte string."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def fnv1a64_hex(arr: np.ndarray) -> str:
    return f"{fnv1a64(tensor_bytes(arr)):016x}"


def state_checksum(tensors: dict[str, np.ndarray]) -> str:
    """SHA-256 over (name, shape, raw bytes) in sorted-name order.

    Used for the frozen-weights contract: any bit flip in any tensor changes
    the digest.
    """
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = tensors[name]
        h.update(name.encode("utf-8"))
        h.update(str(tuple(arr.shape)).encode("utf-8"))
        h.update(tensor_bytes(arr))
    return h.hexdigest()

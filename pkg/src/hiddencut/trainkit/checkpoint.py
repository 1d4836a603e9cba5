"""Binary checkpoint: magic, version, JSON header with a tensor manifest, payload.

Layout (all integers little-endian)::

    b"HCUT" | u32 version | u64 header_len | u32 crc32(header) | header | payload

The header is canonical JSON (sorted keys). Every manifest entry names a
tensor, its shape and its byte offset into the payload; tensors are stored
as contiguous ``<f8`` arrays in manifest order.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..encoder import ModelConfig, param_shapes
from ..errors import ConfigError, CorruptionError, FormatError, ValidationError

MAGIC = b"HCUT"
VERSION = 1
_PREFIX = struct.Struct("<4sIQI")


@dataclass
class Checkpoint:
    params: dict
    model: ModelConfig
    train: dict
    vocab: list | None = None


def _encode(params: dict, model: ModelConfig, train: dict, vocab) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name in param_shapes(model):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    header = {
        "model": model.to_dict(),
        "train": train,
        "vocab": list(vocab) if vocab is not None else None,
        "tensors": manifest,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes), zlib.crc32(hbytes)) + hbytes + payload


def save_checkpoint(path, params: dict, model: ModelConfig, train: dict | None = None,
                    vocab=None) -> Path:
    path = Path(path)
    data = _encode(params, model, train or {}, vocab)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read and fully validate a checkpoint; nothing is returned on error."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CorruptionError("file shorter than the fixed prefix")
    magic, version, hlen, hcrc = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise CorruptionError("header runs past end of file")
    hbytes = data[start:start + hlen]
    if zlib.crc32(hbytes) != hcrc:
        raise FormatError("header checksum mismatch")
    try:
        header = json.loads(hbytes.decode("utf-8"))
        model = ModelConfig(**header["model"])
        manifest = header["tensors"]
        payload_len = int(header["payload_bytes"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    payload = data[start + hlen:]
    if len(payload) != payload_len:
        raise CorruptionError(f"payload is {len(payload)} bytes, header says {payload_len}")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CorruptionError("payload checksum mismatch")

    expected = param_shapes(model)
    names = [t.get("name") for t in manifest]
    if names != list(expected):
        raise ValidationError("tensor manifest does not match the model configuration")
    params, cursor = {}, 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        if shape != expected[entry["name"]]:
            raise ValidationError(f"{entry['name']}: manifest shape {shape} != {expected[entry['name']]}")
        if entry["offset"] != cursor:
            raise CorruptionError(f"{entry['name']}: offset {entry['offset']} != {cursor}")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if cursor + nbytes > len(payload):
            raise CorruptionError(f"{entry['name']} runs past end of payload")
        params[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8,
                                              offset=cursor).astype(np.float64).reshape(shape)
        cursor += nbytes
    if cursor != len(payload):
        raise CorruptionError("trailing bytes after last tensor")
    return Checkpoint(params, model, header.get("train") or {}, header.get("vocab"))

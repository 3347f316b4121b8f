"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SEMAMBA1" | version u32 | header_len u32 | header JSON | float32 blobs | crc32 u32

The JSON header carries the model kind, the config echo, training metadata
and a table of {name, shape, offset} entries pointing into the blob area.
The CRC covers every byte before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..autodiff import Tensor

MAGIC = b"SEMAMBA1"
VERSION = 1
# blobs outside the model inventory (optimizer state) live under this prefix
EXTRA_PREFIX = "optim."


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointKindError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class ParameterMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}


def encode(ckpt: Checkpoint) -> bytes:
    table = []
    blobs = []
    offset = 0
    items = list(ckpt.params.items()) + [(EXTRA_PREFIX + k, v) for k, v in ckpt.extras.items()]
    seen = set()
    for name, arr in items:
        if name in seen:
            raise CheckpointError(f"duplicate blob name {name}")
        seen.add(name)
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"kind": ckpt.kind, "config": ckpt.config, "metadata": ckpt.metadata,
                         "params": table}, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) + 12:
        raise CheckpointCorruptError("file truncated")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointVersionError("bad magic bytes: not a checkpoint or unsupported format")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointCorruptError("CRC mismatch (truncated or corrupted file)")
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as e:
        raise CheckpointCorruptError(f"unreadable header: {e}") from None
    blob_area = raw[start + hlen:-4]
    params, extras = {}, {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        chunk = blob_area[entry["offset"]:entry["offset"] + n]
        if len(chunk) != n:
            raise CheckpointCorruptError(f"blob {entry['name']} truncated")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float64)
        name = entry["name"]
        if name.startswith(EXTRA_PREFIX):
            extras[name[len(EXTRA_PREFIX):]] = arr
        else:
            params[name] = arr
    return Checkpoint(header["kind"], header["config"], params, header["metadata"], extras)


def check_inventory(params: Mapping[str, np.ndarray], expected: Mapping[str, tuple]) -> None:
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ParameterMismatchError(f"missing {missing[:5]}, unexpected {extra[:5]}")
    for name, shape in expected.items():
        if tuple(np.shape(params[name])) != tuple(shape):
            raise ParameterMismatchError(f"{name}: shape {np.shape(params[name])}, expected {shape}")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path: str | Path, kind: str | None = None) -> Checkpoint:
    ckpt = decode(Path(path).read_bytes())
    if kind is not None and ckpt.kind != kind:
        raise CheckpointKindError(f"checkpoint holds a {ckpt.kind!r} model, expected {kind!r}")
    return ckpt

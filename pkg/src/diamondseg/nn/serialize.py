"""Binary weight files.

Layout (all integers little-endian uint32)::

    magic b"DSGW" | version | tensor count
    per tensor: name length | name (utf-8) | ndim | dims... | float32 data (little-endian, C order)
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSGW"
VERSION = 1


def dumps_weights(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads_weights(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ValueError("not a weight file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    offset = 12
    state = {}
    for _ in range(count):
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + length].decode("utf-8")
        offset += length
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(dims)
        offset += 4 * size
        state[name] = arr.astype(np.float32)
    if offset != len(data):
        raise ValueError("trailing bytes in weight file")
    return state


def save_weights(state: dict[str, np.ndarray], path) -> str:
    data = dumps_weights(state)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_weights(path) -> dict[str, np.ndarray]:
    return loads_weights(Path(path).read_bytes())


def weights_hash(state: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps_weights(state)).hexdigest()

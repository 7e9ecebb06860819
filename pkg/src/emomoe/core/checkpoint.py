"""Flat named-tensor checkpoint container.

Binary layout (all integers little-endian):

    magic     4 bytes  b"NTC1"
    count     uint32   number of entries
    per entry, in order:
        name_len  uint16
        name      name_len bytes, UTF-8
        dtype     1 byte,  b"f" (only float32 payloads are defined)
        ndim      uint8
        dims      ndim * uint32
    payload   concatenated entry data, little-endian float32, row-major,
              in entry order

Values are stored as float32 regardless of in-memory precision; a saved file
re-saved after loading is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTC1"


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    header = [MAGIC, struct.pack("<I", len(tensors))]
    payload = []
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        shape = arr.shape
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)))
        header.append(raw)
        header.append(b"f")
        header.append(struct.pack("<B", len(shape)))
        header.append(struct.pack(f"<{len(shape)}I", *shape))
        payload.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(header + payload))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a named-tensor checkpoint")
    (count,) = struct.unpack_from("<I", blob, 4)
    offset = 8
    entries: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        dtype = blob[offset : offset + 1]
        offset += 1
        if dtype != b"f":
            raise ValueError(f"{path}: unknown dtype tag {dtype!r} for {name}")
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        entries.append((name, shape))
    out: dict[str, np.ndarray] = {}
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        out[name] = arr.reshape(shape).astype(np.float64)
    return out

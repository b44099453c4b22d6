"""Binary checkpoint format.

Layout: magic "EBMSOD01", u32 format version, length-prefixed UTF-8 config
echo, u64 iteration, u32 phase tag, then a named-array section.  Every array
is little-endian float64 prefixed by its name, rank and extents.  Saving
then loading is bitwise idempotent.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"EBMSOD01"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str, config_text: str, iteration: int, phase: int,
                    arrays: dict) -> None:
    blob = config_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<QI", iteration, phase))
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
            f.write(arr.tobytes())


def _read(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def load_checkpoint(path: str) -> tuple[str, int, int, dict]:
    """Returns (config_text, iteration, phase, arrays)."""
    with open(path, "rb") as f:
        if _read(f, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", _read(f, 4))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {version}")
        (blob_len,) = struct.unpack("<Q", _read(f, 8))
        config_text = _read(f, blob_len).decode("utf-8")
        iteration, phase = struct.unpack("<QI", _read(f, 12))
        (count,) = struct.unpack("<I", _read(f, 4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(f, 2))
            name = _read(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read(f, 4))
            shape = tuple(struct.unpack("<Q", _read(f, 8))[0]
                          for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(_read(f, n * 8), dtype="<f8").reshape(shape)
            arrays[name] = arr.copy()
    return config_text, iteration, phase, arrays

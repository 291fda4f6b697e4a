"""Binary model checkpoints.

Layout: magic "LSNN", format version (u32), parameter count (u32), then per
parameter: name length (u32), UTF-8 name, ndim (u32), each dim (u32), and the
values as little-endian float64. Round trips are bit-exact; parameter order
is preserved.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LSNN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path, params: dict) -> None:
    if not params:
        raise CheckpointError("refusing to write a checkpoint with no parameters")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> dict:
    data = Path(path).read_bytes()
    off = 0

    def need(n, what):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset {off}, "
                f"file has {len(data)}"
            )
        piece = data[off : off + n]
        off += n
        return piece

    if need(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic at offset 0: not a {MAGIC.decode()} checkpoint")
    version, count = struct.unpack("<II", need(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")

    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", need(4, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", need(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", need(4 * ndim, "shape"))
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(need(8 * size, f"values of {name!r}"), dtype="<f8")
        params[name] = values.reshape(shape).astype(np.float64)
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after offset {off}")
    return params

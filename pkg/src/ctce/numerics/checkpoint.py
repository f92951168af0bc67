"""Binary parameter checkpoints.

Layout (little-endian)::

    b"CTCEPAR1"            magic
    u32                    entry count
    per entry:
      u32                  path length in bytes
      bytes                UTF-8 path
      u32                  rank
      u32 * rank           dims
      f64 * prod(dims)     values, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import ParameterSet

MAGIC = b"CTCEPAR1"


class CheckpointError(ValueError):
    pass


def dumps(state: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(state))]
    for path, value in state.items():
        value = np.asarray(value, dtype="<f8")
        name = path.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a parameter checkpoint (bad magic)")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        path = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        state[path] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return state


def save(path: str | Path, params: ParameterSet | dict[str, np.ndarray]) -> None:
    state = params.state() if isinstance(params, ParameterSet) else params
    Path(path).write_bytes(dumps(state))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())

"""V2X link: binary query-frame packets and a seeded Bernoulli drop model.

Packet layout, little-endian::

    offset  size  field
    0       8     magic b"CTCEQRY1" (the trailing digit is the format version)
    8       2     agent_id      u16
    10      2     query count   u16
    12      4     frame_id      u32
    16      12    sender rotation as an axis-angle vector, 3 x f32
    28      12    sender translation, 3 x f32
    40            per query: ref_point 3 x f32, confidence f32, embedding d x f32

so a packet is ``40 + count * 4 * (4 + d)`` bytes and ``d`` can be recovered
from the length.  The timestamp is not sent: it is ``frame_id * 0.1 s``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import FrameTag, Pose, QueryFrame
from .numerics import Tensor

MAGIC = b"CTCEQRY1"
HEADER = struct.Struct("<8sHHI3f3f")
HEADER_SIZE = HEADER.size  # 40
MAX_QUERIES = 2 ** 16 - 1


class PacketError(ValueError):
    code = 0


class BadMagicError(PacketError):
    code = 1


class TruncatedPacketError(PacketError):
    code = 2


class LengthMismatchError(PacketError):
    code = 3


class OversizeFrameError(PacketError):
    code = 4


def packet_size(count: int, d: int) -> int:
    return HEADER_SIZE + count * 4 * (4 + d)


def serialize(f: QueryFrame) -> bytes:
    if f.count > MAX_QUERIES:
        raise OversizeFrameError(f"{f.count} queries exceed the u16 count field")
    rotvec = Rotation.from_matrix(f.sender_pose.rotation).as_rotvec()
    head = HEADER.pack(MAGIC, f.agent_id, f.count, f.frame_id, *rotvec, *f.sender_pose.translation)
    body = np.concatenate([f.ref_points, f.confidences[:, None], f.embeddings.data], axis=1)
    return head + body.astype("<f4").tobytes()


def deserialize(packet: bytes, d: int | None = None,
                tag: FrameTag = FrameTag.ROADSIDE_TEMPORAL) -> QueryFrame:
    """Inverse of :func:`serialize`; payloads widen from f32 to f64.

    ``d`` is inferred from the packet length when not given; a packet cut
    inside its payload then surfaces as a length mismatch, since truncation
    and a different ``d`` cannot be told apart.
    """
    if len(packet) < len(MAGIC) and MAGIC.startswith(bytes(packet)):
        raise TruncatedPacketError(f"packet of {len(packet)} bytes ends inside the magic")
    if packet[:len(MAGIC)] != MAGIC:
        raise BadMagicError("bad packet magic")
    if len(packet) < HEADER_SIZE:
        raise TruncatedPacketError(f"packet of {len(packet)} bytes is shorter than the header")
    _, agent_id, count, frame_id, *pose_vals = HEADER.unpack_from(packet)
    payload = len(packet) - HEADER_SIZE
    if d is None:
        if count == 0:
            if payload:
                raise LengthMismatchError("empty frame carries a payload")
            d = 0
        else:
            if payload % (4 * count) or payload // (4 * count) < 4:
                raise LengthMismatchError(f"payload of {payload} bytes does not fit {count} queries")
            d = payload // (4 * count) - 4
    expected = packet_size(count, d)
    if len(packet) < expected:
        raise TruncatedPacketError(f"expected {expected} bytes, got {len(packet)}")
    if len(packet) > expected:
        raise LengthMismatchError(f"expected {expected} bytes, got {len(packet)}")
    rot = Rotation.from_rotvec(np.asarray(pose_vals[:3], dtype=np.float32).astype(np.float64)).as_matrix()
    pose = Pose(rot, np.asarray(pose_vals[3:], dtype=np.float32).astype(np.float64))
    body = np.frombuffer(packet, dtype="<f4", offset=HEADER_SIZE).astype(np.float64).reshape(count, 4 + d)
    return QueryFrame(agent_id, frame_id, pose, body[:, :3], Tensor(body[:, 4:].copy()),
                      body[:, 3].copy(), tag)


@dataclass(frozen=True)
class ChannelConfig:
    pdr: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.pdr <= 1.0:
            raise ValueError(f"pdr {self.pdr} outside [0, 1]")


def drop_draw(seed: int, frame_id: int) -> float:
    """Uniform draw that decides the fate of ``frame_id``; independent of pdr."""
    return float(np.random.default_rng([seed, 0xC4A, frame_id]).random())


def is_dropped(cfg: ChannelConfig, frame_id: int) -> bool:
    return drop_draw(cfg.seed, frame_id) < cfg.pdr


def transmit(packet: bytes, cfg: ChannelConfig, frame_id: int) -> bytes | None:
    """Deliver the packet unchanged, or lose it whole with probability ``cfg.pdr``."""
    return None if is_dropped(cfg, frame_id) else packet


# -- capture files ---------------------------------------------------------------
_REC = struct.Struct("<IBI")


class CaptureWriter:
    """Append ``(frame_id u32, delivered u8, length u32, bytes)`` records."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "wb")

    def write(self, frame_id: int, packet: bytes, delivered: bool) -> None:
        self._fh.write(_REC.pack(frame_id, int(delivered), len(packet)))
        self._fh.write(packet)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_capture(path: str | Path) -> Iterator[tuple[int, bool, bytes]]:
    blob = Path(path).read_bytes()
    pos = 0
    while pos < len(blob):
        if pos + _REC.size > len(blob):
            raise TruncatedPacketError("truncated capture record header")
        frame_id, delivered, n = _REC.unpack_from(blob, pos)
        pos += _REC.size
        if pos + n > len(blob):
            raise TruncatedPacketError("truncated capture record body")
        yield frame_id, bool(delivered), blob[pos:pos + n]
        pos += n

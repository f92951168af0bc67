"""Rigid poses, boxes, the query data model and FIFO history buffers."""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .numerics import Tensor

FRAME_PERIOD = 0.1


def frame_time(frame_id: int) -> float:
    return frame_id * FRAME_PERIOD


def wrap_yaw(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.remainder(float(theta), 2.0 * math.pi)
    return math.pi if r == -math.pi else r


def wrap_yaw_array(theta: np.ndarray) -> np.ndarray:
    r = np.remainder(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(r <= -np.pi, np.pi, r)


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t`` (sensor to world unless stated otherwise)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rot_z(yaw), translation)

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) < tol)

    def apply(self, points) -> np.ndarray:
        """Transform a 3-vector or an ``(N, 3)`` array."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self.compose(other)(x) == self(other(x))``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def flat(self) -> np.ndarray:
        """Row-major rotation followed by translation (12 values)."""
        return np.concatenate([self.rotation.reshape(-1), self.translation])

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.rotation, other.rotation, atol=tol)
                    and np.allclose(self.translation, other.translation, atol=tol))


def pose_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def transform_point(p: Pose, x) -> np.ndarray:
    return p.apply(x)


@dataclass(frozen=True, eq=False)
class Box3D:
    center: np.ndarray
    dims: np.ndarray
    yaw: float
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if np.any(dims <= 0):
            raise ValueError(f"box dims must be positive, got {dims}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", wrap_yaw(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))

    def transformed(self, pose: Pose) -> "Box3D":
        """The same box expressed after applying ``pose`` (yaw follows the pose's heading)."""
        return replace(self, center=pose.apply(self.center), yaw=self.yaw + pose.yaw)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "dims": self.dims.tolist(), "yaw": self.yaw,
                "class": self.class_id, "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(d["center"], d["dims"], d["yaw"], d["class"], d.get("score", 1.0))


@dataclass(frozen=True)
class Query:
    embedding: np.ndarray
    ref_point: np.ndarray
    confidence: float
    timestamp: float


class FrameTag(str, enum.Enum):
    ROADSIDE_RAW = "roadside_raw"
    ROADSIDE_TEMPORAL = "roadside_temporal"
    EGO = "ego"
    FUSED = "fused"
    RECONSTRUCTED = "reconstructed"


@dataclass(eq=False)
class QueryFrame:
    """One agent's query set at one timestamp.

    Queries are stored column-wise: ``ref_points (N, 3)`` in the coordinates
    of ``sender_pose`` (local -> world), ``embeddings (N, d)`` as a tensor so
    that training can differentiate through them, ``confidences (N,)``.
    """

    agent_id: int
    frame_id: int
    sender_pose: Pose
    ref_points: np.ndarray
    embeddings: Tensor
    confidences: np.ndarray
    tag: FrameTag
    timestamp: float | None = None

    def __post_init__(self):
        if self.timestamp is None:
            self.timestamp = frame_time(self.frame_id)
        if not isinstance(self.embeddings, Tensor):
            self.embeddings = Tensor(self.embeddings)
        self.ref_points = np.asarray(self.ref_points, dtype=np.float64).reshape(-1, 3)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        n = len(self.ref_points)
        if self.embeddings.ndim != 2 or len(self.embeddings) != n or len(self.confidences) != n:
            raise ValueError("ref_points, embeddings and confidences disagree on query count")
        self.tag = FrameTag(self.tag)

    @property
    def count(self) -> int:
        return len(self.ref_points)

    def __len__(self) -> int:
        return self.count

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def queries(self) -> list[Query]:
        emb = self.embeddings.data
        return [Query(emb[i].copy(), self.ref_points[i].copy(), float(self.confidences[i]), self.timestamp)
                for i in range(self.count)]

    @classmethod
    def empty(cls, agent_id: int, frame_id: int, pose: Pose, d: int, tag: FrameTag) -> "QueryFrame":
        return cls(agent_id, frame_id, pose, np.zeros((0, 3)), Tensor(np.zeros((0, d))), np.zeros(0), tag)

    def world_points(self) -> np.ndarray:
        return self.sender_pose.apply(self.ref_points)

    def with_(self, **changes) -> "QueryFrame":
        return replace(self, **changes)

    def detached(self) -> "QueryFrame":
        return replace(self, embeddings=self.embeddings.detach())

    def subset(self, idx) -> "QueryFrame":
        from .numerics.tensor import take_rows

        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, ref_points=self.ref_points[idx], embeddings=take_rows(self.embeddings, idx),
                       confidences=self.confidences[idx])


def reframe_query_frame(f: QueryFrame, target: Pose) -> QueryFrame:
    """Express ref_points in the frame whose local->world pose is ``target``."""
    rel = target.inverse().compose(f.sender_pose)
    return replace(f, ref_points=rel.apply(f.ref_points), sender_pose=target)


class OrderingError(ValueError):
    pass


class HistoryBuffer:
    """FIFO store of the most recent ``capacity`` frames, oldest first."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self._entries: deque = deque()

    def push(self, frame: QueryFrame, extra=None) -> "HistoryBuffer":
        if self._entries and frame.frame_id <= self._entries[-1][0].frame_id:
            raise OrderingError(
                f"frame {frame.frame_id} pushed after frame {self._entries[-1][0].frame_id}")
        if self.capacity == 0:
            return self
        self._entries.append((frame, extra))
        while len(self._entries) > self.capacity:
            self._entries.popleft()
        return self

    @property
    def frames(self) -> list[QueryFrame]:
        return [f for f, _ in self._entries]

    def entries(self) -> list[tuple[QueryFrame, object]]:
        return list(self._entries)

    def frame_ids(self) -> list[int]:
        return [f.frame_id for f, _ in self._entries]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[QueryFrame]:
        return iter(self.frames)

    def clear(self) -> None:
        self._entries.clear()


def buffer_push(b: HistoryBuffer, f: QueryFrame) -> HistoryBuffer:
    return b.push(f)
